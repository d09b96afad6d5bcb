import json

import pytest

from metric_losses import LossBreakdown
from training_monitor import LOSS_COMPONENTS, StepRecord, TrainingMonitor, loss_trend, read_step_log, summarize


def breakdown(value):
    return LossBreakdown(l_ce=value, l_t_sa=0.1, l_t_ia=0.0, l_norm=2.0, l_all=value + 0.3)


@pytest.mark.parametrize('values, verdict', [
    ([3.0, 2.0, 1.0], 'improving'),
    ([1.0, 1.0, 1.0], 'stable'),
    ([1.0, 1.5, 2.0], 'declining'),
    ([1.0], 'insufficient_data'),
])
def test_loss_trend(values, verdict):
    assert loss_trend(values) == verdict


def test_summarize():
    records = [StepRecord.from_breakdown(0, i, breakdown(v)) for i, v in enumerate([1.0, 2.0, 3.0])]
    summary = summarize(records)
    assert set(summary) == set(LOSS_COMPONENTS)
    assert summary['L_ce'] == {'mean': 2.0, 'min': 1.0, 'max': 3.0, 'std': 1.0}
    assert summary['L_t_ia']['std'] == 0.0


def test_summarize_empty():
    assert summarize([]) == {}


class TestTrainingMonitor:
    def test_step_log_is_json_lines(self, tmp_path):
        path = tmp_path / 'train_log.jsonl'
        monitor = TrainingMonitor(str(path))
        monitor.start_session('mls-seed0', total_steps=4)
        for step, value in enumerate([4.0, 3.0, 2.0, 1.0]):
            monitor.record_step(step // 2, step, breakdown(value))
        monitor.end_session()

        lines = path.read_text().splitlines()
        assert len(lines) == 4
        assert set(json.loads(lines[0])) == {'epoch', 'step', *LOSS_COMPONENTS}
        records = read_step_log(str(path))
        assert [r.L_ce for r in records] == [4.0, 3.0, 2.0, 1.0]
        assert records[3].epoch == 1

    def test_epoch_summaries_and_analytics(self):
        monitor = TrainingMonitor()
        monitor.start_session('baseline-seed1')
        for epoch, values in enumerate([[5.0, 4.0, 3.0], [2.0, 1.5, 1.0]]):
            for step, value in enumerate(values):
                monitor.record_step(epoch, epoch * 3 + step, breakdown(value))
            summary = monitor.end_epoch(epoch)
            assert summary['steps'] == 3
            assert summary['trend'] == 'improving'
        session = monitor.end_session()
        analytics = monitor.get_session_analytics(session)
        assert analytics['steps'] == 6
        assert analytics['epoch_trend'] == 'improving'
        assert analytics['losses']['L_all']['max'] == pytest.approx(5.3)
        assert analytics['end_time'] is not None
        assert monitor.current_session is None
