"""
Visualization Utilities Module
Plotly charts for loss traces, grounding reports, instance embeddings and ablations
"""

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from utils.evalkit import THRESHOLDS, get_metric_status

# Color palette
COLORS = {
    'good': '#2ecc71',
    'acceptable': '#f39c12',
    'poor': '#e74c3c',
    'primary': '#0077B6',
    'secondary': '#00B4D8',
    'tertiary': '#90E0EF',
    'text_dark': '#1A202C',
    'grid': '#E2E8F0',
    'border': '#CBD5E0',
    'bg_chart': '#ffffff',
    'stages': {'image': '#0077B6', 'video': '#F77F00'},
}

FONT_FAMILY = 'Inter, -apple-system, BlinkMacSystemFont, sans-serif'


def get_standard_layout():
    """Shared layout: white background, centered titles, light grid"""
    axis = {
        'title': {'font': {'color': COLORS['text_dark'], 'size': 13}},
        'tickfont': {'color': COLORS['text_dark'], 'size': 12},
        'gridcolor': COLORS['grid'],
        'showgrid': True,
        'linecolor': COLORS['border'],
    }
    return {
        'paper_bgcolor': COLORS['bg_chart'],
        'plot_bgcolor': COLORS['bg_chart'],
        'font': {'family': FONT_FAMILY, 'size': 13, 'color': COLORS['text_dark']},
        'title': {'x': 0.5, 'xanchor': 'center', 'font': {'size': 18, 'color': COLORS['text_dark']}},
        'xaxis': dict(axis),
        'yaxis': dict(axis),
        'margin': {'l': 60, 'r': 30, 't': 80, 'b': 60},
    }


def _smooth(values, window):
    return pd.Series(values, dtype=float).rolling(window, min_periods=1).mean()


def create_loss_curve(loss_df, title='Training loss', window=50):
    """
    Line chart of a loss trace with a rolling mean overlay.

    Args:
        loss_df: DataFrame with columns step, loss and optionally stage
        window: Rolling-mean window in steps
    """
    fig = go.Figure()
    groups = loss_df.groupby('stage', sort=False) if 'stage' in loss_df else [('loss', loss_df)]
    for name, part in groups:
        color = COLORS['stages'].get(name, COLORS['primary'])
        fig.add_trace(go.Scatter(
            x=part['step'], y=part['loss'], mode='lines', name=f'{name} (raw)',
            line=dict(color=color, width=1), opacity=0.35,
        ))
        fig.add_trace(go.Scatter(
            x=part['step'], y=_smooth(part['loss'], window), mode='lines', name=f'{name} (mean {window})',
            line=dict(color=color, width=2.5),
        ))
    fig.update_layout(
        **get_standard_layout(),
        height=400,
        hovermode='x unified',
        xaxis_title='Step',
        yaxis_title='Epsilon MSE',
    )
    fig.update_layout(title_text=title)
    return fig


def create_iou_heatmap(iou_df, title='Per-frame IoU'):
    """Heatmap of instances x frames; absent boxes stay blank"""
    fig = px.imshow(
        iou_df.astype(float),
        labels=dict(x='Frame', y='Instance', color='IoU'),
        zmin=0.0,
        zmax=1.0,
        aspect='auto',
        color_continuous_scale='RdYlGn',
        text_auto='.2f',
    )
    fig.update_layout(**get_standard_layout(), height=350)
    fig.update_layout(title_text=title)
    fig.update_yaxes(type='category')
    return fig


def create_similarity_heatmap(matrix, title='Instance embedding similarity'):
    """Cosine-similarity matrix of the learned instance tokens"""
    matrix = np.asarray(matrix, dtype=float)
    labels = [str(i) for i in range(matrix.shape[0])]
    fig = px.imshow(
        pd.DataFrame(matrix, index=labels, columns=labels),
        labels=dict(x='Slot', y='Slot', color='cos'),
        zmin=-1.0,
        zmax=1.0,
        color_continuous_scale='RdBu',
        text_auto='.2f',
    )
    fig.update_layout(**get_standard_layout(), height=420)
    fig.update_layout(title_text=title)
    return fig


def create_ablation_bar(ablation_df, metric='mean_iou', title=None):
    """
    Grouped bars of one metric per configuration, mean over seeds with std error bars.

    Args:
        ablation_df: DataFrame with columns variant, seed and the metric
    """
    summary = (ablation_df.groupby('variant', sort=False)[metric]
               .agg(['mean', 'std']).fillna(0.0).reset_index())
    threshold = THRESHOLDS.get(metric)
    bar_colors = [get_metric_status(v, threshold)[1] if threshold else COLORS['primary']
                  for v in summary['mean']]
    fig = go.Figure(go.Bar(
        x=summary['variant'],
        y=summary['mean'],
        error_y=dict(type='data', array=summary['std']),
        marker_color=bar_colors,
        text=summary['mean'].round(3),
        textposition='outside',
    ))
    if threshold is not None:
        fig.add_hline(y=threshold, line_dash='dash', line_color=COLORS['poor'],
                      annotation_text=f'Threshold: {threshold}')
    fig.update_layout(
        **get_standard_layout(),
        height=420,
        showlegend=False,
        xaxis_title='Configuration',
        yaxis_title=metric.replace('_', ' ').title(),
    )
    fig.update_layout(title_text=title or metric.replace('_', ' ').title())
    return fig


def create_frame_strip(pixels, boxes=None, title=None):
    """
    Frames side by side with optional annotation boxes.

    Args:
        pixels: array [T, h, w, 3] in [0, 1]
        boxes: optional per-frame lists of (Box, color hex)
    """
    pixels = np.clip(np.asarray(pixels, dtype=float), 0.0, 1.0)
    count, height, width, _ = pixels.shape
    strip = np.concatenate(list(pixels), axis=1)
    fig = px.imshow((strip * 255).astype(np.uint8))
    for t, frame_boxes in enumerate(boxes or []):
        for box, color in frame_boxes:
            fig.add_shape(
                type='rect',
                x0=t * width + box.x1 * width - 0.5, x1=t * width + box.x2 * width - 0.5,
                y0=box.y1 * height - 0.5, y1=box.y2 * height - 0.5,
                line=dict(color=color, width=1),
            )
    fig.update_xaxes(showticklabels=False)
    fig.update_yaxes(showticklabels=False)
    fig.update_layout(margin=dict(l=10, r=10, t=40 if title else 10, b=10), height=max(160, 3 * height))
    if title:
        fig.update_layout(title_text=title)
    return fig
