"""
Evaluation Page
Grounding scores, per-frame IoU, instance-token similarity and ablation results
"""

import streamlit as st

from utils.data_loader import list_runs, load_ablation, load_report, load_similarity, report_iou_frame
from utils.evalkit import THRESHOLDS, get_metric_status
from utils.visualizations import create_ablation_bar, create_iou_heatmap, create_similarity_heatmap

METRIC_LABELS = {
    'mean_iou': 'Mean IoU',
    'detection_rate': 'Detection rate (IoU >= 0.5)',
    'identity_consistency': 'Identity consistency',
}


def _metric_row(summary):
    cols = st.columns(len(METRIC_LABELS))
    for col, (key, label) in zip(cols, METRIC_LABELS.items()):
        value = summary.get(key)
        status, color = get_metric_status(value, THRESHOLDS[key])
        col.metric(label, f"{value:.3f}" if value is not None else "n/a")
        col.markdown(f"<span style='color:{color}'>{status} (target {THRESHOLDS[key]})</span>",
                     unsafe_allow_html=True)


def _render_report(run_dir):
    report = load_report(run_dir)
    summary = report['summary']
    _metric_row(summary)
    st.caption(f"{summary.get('n_clips', 0)} clips, {summary.get('n_boxes', 0)} present boxes"
               + (f", Frechet feature distance {summary['fvd_proxy']:.4f}" if 'fvd_proxy' in summary else ""))

    clips = report.get('clips', {})
    if clips:
        name = st.selectbox("Clip", sorted(clips))
        st.plotly_chart(create_iou_heatmap(report_iou_frame(clips[name]), f"Per-frame IoU: {name}"),
                        use_container_width=True)

    similarity = load_similarity(run_dir)
    if similarity is not None:
        st.plotly_chart(create_similarity_heatmap(similarity.values), use_container_width=True)


def _render_ablation(run_dir):
    table, verdicts = load_ablation(run_dir)
    metric = st.radio("Metric", list(METRIC_LABELS), horizontal=True, format_func=METRIC_LABELS.get)
    st.plotly_chart(create_ablation_bar(table, metric), use_container_width=True)
    if not verdicts.empty:
        st.dataframe(verdicts, use_container_width=True, hide_index=True)
    st.dataframe(table, use_container_width=True, hide_index=True)


def render_evaluation_page(root):
    st.title("Evaluation")
    runs = list_runs(str(root))
    runs = runs[runs['kind'].isin(['evaluation', 'ablation'])] if not runs.empty else runs
    if runs.empty:
        st.info("No evaluation or ablation runs under this root.")
        return

    run = st.selectbox("Run", runs['run'].tolist())
    row = runs.loc[runs['run'] == run].iloc[0]
    if row['kind'] == 'ablation':
        _render_ablation(row['path'])
    else:
        _render_report(row['path'])
