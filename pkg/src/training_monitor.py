# src/training_monitor.py
"""
AdvMetric - Training Progress Monitoring
Append-only step log, per-epoch loss statistics, and loss-trend verdicts
"""

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

from metric_losses import LossBreakdown

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ('L_ce', 'L_t_sa', 'L_t_ia', 'L_norm', 'L_all')


@dataclass
class StepRecord:
    """One optimisation step as written to the training log"""
    epoch: int
    step: int
    L_ce: float
    L_t_sa: float
    L_t_ia: float
    L_norm: float
    L_all: float

    @classmethod
    def from_breakdown(cls, epoch: int, step: int, breakdown: LossBreakdown) -> "StepRecord":
        return cls(epoch=epoch, step=step, **breakdown.to_log())


@dataclass
class TrainingSession:
    """Steps and timing of one (configuration, seed) run"""
    run_id: str
    start_time: datetime
    end_time: Optional[datetime] = None
    total_steps: int = 0
    steps: List[StepRecord] = field(default_factory=list)

    @property
    def duration_seconds(self) -> float:
        end = self.end_time or datetime.now()
        return (end - self.start_time).total_seconds()

    @property
    def steps_per_second(self) -> float:
        return len(self.steps) / self.duration_seconds if self.duration_seconds > 0 else 0


def loss_trend(values: Sequence[float], tolerance: float = 1e-3) -> str:
    """Least-squares slope verdict for a loss series; falling loss is 'improving'"""
    if len(values) < 2:
        return "insufficient_data"
    n = len(values)
    x = list(range(n))
    slope = (n * sum(x[i] * values[i] for i in range(n)) - sum(x) * sum(values)) / (n * sum(xi ** 2 for xi in x) - sum(x) ** 2)
    if slope < -tolerance:
        return "improving"
    if slope > tolerance:
        return "declining"
    return "stable"


def summarize(records: Sequence[StepRecord]) -> Dict[str, Dict[str, float]]:
    """mean/min/max/std of every loss component"""
    summary = {}
    for name in LOSS_COMPONENTS:
        values = [getattr(r, name) for r in records]
        if values:
            summary[name] = {
                'mean': statistics.mean(values),
                'min': min(values),
                'max': max(values),
                'std': statistics.stdev(values) if len(values) > 1 else 0.0,
            }
    return summary


class TrainingMonitor:
    """Collects step records for a run and mirrors them to a JSON-lines log"""

    def __init__(self, log_path: Optional[str] = None):
        self.log_path = log_path
        self.current_session: Optional[TrainingSession] = None
        self.epoch_summaries: List[Dict[str, Any]] = []
        self._log_file = None

    def start_session(self, run_id: str, total_steps: int = 0) -> TrainingSession:
        self.current_session = TrainingSession(run_id=run_id, start_time=datetime.now(), total_steps=total_steps)
        self.epoch_summaries = []
        if self.log_path:
            self._log_file = open(self.log_path, 'w')
        logger.info("training session %s started (%d steps planned)", run_id, total_steps)
        return self.current_session

    def record_step(self, epoch: int, step: int, breakdown: LossBreakdown) -> StepRecord:
        record = StepRecord.from_breakdown(epoch, step, breakdown)
        if self.current_session is not None:
            self.current_session.steps.append(record)
        if self._log_file is not None:
            self._log_file.write(json.dumps(asdict(record)) + '\n')
            self._log_file.flush()
        return record

    def end_epoch(self, epoch: int) -> Dict[str, Any]:
        steps = [r for r in self.current_session.steps if r.epoch == epoch] if self.current_session else []
        summary = {
            'epoch': epoch,
            'steps': len(steps),
            'losses': summarize(steps),
            'trend': loss_trend([r.L_all for r in steps]),
        }
        self.epoch_summaries.append(summary)
        mean_all = summary['losses'].get('L_all', {}).get('mean', float('nan'))
        logger.info("epoch %d: %d steps, mean L_all %.4f (%s)", epoch, len(steps), mean_all, summary['trend'])
        return summary

    def end_session(self) -> Optional[TrainingSession]:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
        if self.current_session is None:
            return None
        self.current_session.end_time = datetime.now()
        finished, self.current_session = self.current_session, None
        logger.info("training session %s finished in %.1fs (%.2f steps/s)",
                    finished.run_id, finished.duration_seconds, finished.steps_per_second)
        return finished

    def get_session_analytics(self, session: TrainingSession) -> Dict[str, Any]:
        return {
            'run_id': session.run_id,
            'start_time': session.start_time.isoformat(),
            'end_time': session.end_time.isoformat() if session.end_time else None,
            'duration_seconds': session.duration_seconds,
            'steps': len(session.steps),
            'steps_per_second': session.steps_per_second,
            'losses': summarize(session.steps),
            'epoch_trend': loss_trend([s['losses']['L_all']['mean'] for s in self.epoch_summaries
                                       if 'L_all' in s['losses']]),
            'epochs': self.epoch_summaries,
        }


def read_step_log(path: str) -> List[StepRecord]:
    with open(path) as f:
        return [StepRecord(**json.loads(line)) for line in f if line.strip()]
