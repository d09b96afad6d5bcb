# src/report_plots.py
"""
AdvMetric - Embedding Plots
Static SVG scatter plots of PCA projections
"""

import logging
import os
from typing import Dict, Optional

import numpy as np
import plotly.colors
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from eval_analytics import PcaProjection

logger = logging.getLogger(__name__)

FIGURE_SIZE = 800
CLASS_COLORS = plotly.colors.qualitative.Plotly  # ten colours, one per digit
KIND_SYMBOLS = {
    'clean': 'circle',
    'sensitivity': 'x',
    'invariance': 'diamond',
}


def _scatter_traces(projection: PcaProjection, show_legend: bool = True):
    n = projection.scores.shape[0]
    labels = projection.labels if projection.labels is not None else np.zeros(n, dtype=int)
    kinds = projection.kinds if projection.kinds is not None else np.full(n, 'clean')
    y = projection.scores[:, 1] if projection.scores.shape[1] > 1 else np.zeros(n)
    traces = []
    for kind in [k for k in KIND_SYMBOLS if np.any(kinds == k)]:
        mask = kinds == kind
        traces.append(go.Scatter(
            x=projection.scores[mask, 0],
            y=y[mask],
            mode='markers',
            name=kind,
            legendgroup=kind,
            showlegend=show_legend,
            marker=dict(
                symbol=KIND_SYMBOLS[kind],
                size=5 if kind == 'clean' else 7,
                color=[CLASS_COLORS[int(l) % len(CLASS_COLORS)] for l in labels[mask]],
                opacity=0.5 if kind == 'clean' else 0.9,
            ),
        ))
    return traces


def _axis_titles(projection: PcaProjection):
    ratios = projection.explained_variance_ratio
    second = ratios[1] if len(ratios) > 1 else 0.0
    return f"PC1 ({ratios[0] * 100:.1f}%)", f"PC2 ({second * 100:.1f}%)"


def emit_pca_plot(projection: PcaProjection, path: str, title: Optional[str] = None):
    """Class-coloured scatter with one marker symbol per attack kind, 800x800 SVG"""
    fig = go.Figure(data=_scatter_traces(projection))
    x_title, y_title = _axis_titles(projection)
    fig.update_layout(
        title=title or "Penultimate embedding (PCA)",
        xaxis_title=x_title,
        yaxis_title=y_title,
        template='plotly_white',
        legend_title="Attack kind",
    )
    _write_svg(fig, path)


def emit_pca_comparison(projections: Dict[str, PcaProjection], path: str):
    """Side-by-side panels, one per model, sharing the legend"""
    names = list(projections)
    fig = make_subplots(rows=1, cols=len(names), subplot_titles=names)
    for col, name in enumerate(names, start=1):
        for trace in _scatter_traces(projections[name], show_legend=(col == 1)):
            fig.add_trace(trace, row=1, col=col)
        x_title, y_title = _axis_titles(projections[name])
        fig.update_xaxes(title_text=x_title, row=1, col=col)
        fig.update_yaxes(title_text=y_title, row=1, col=col)
    fig.update_layout(title="Embedding comparison (PCA)", template='plotly_white')
    _write_svg(fig, path, width=FIGURE_SIZE * len(names))


def _write_svg(fig: go.Figure, path: str, width: int = FIGURE_SIZE, height: int = FIGURE_SIZE):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.write_image(path, format='svg', width=width, height=height)
    logger.info("wrote figure %s", path)
