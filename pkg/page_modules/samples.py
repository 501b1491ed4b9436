"""
Samples Page
Frame strips of generated or synthetic clips with their annotation boxes
"""

import streamlit as st

from utils.data_loader import list_clips, list_runs, load_clip
from utils.evalkit import grounding_miou
from utils.trackdata import PALETTE
from utils.visualizations import create_frame_strip


def _hex(color):
    r, g, b = (int(round(c * 255)) for c in color)
    return f'#{r:02x}{g:02x}{b:02x}'


def annotation_overlay(clip):
    """Per-frame (Box, hex color) pairs in the category palette"""
    return [
        [(tr.boxes[t], _hex(PALETTE[tr.category_id % len(PALETTE)]))
         for tr in clip.tracklets if tr.boxes[t] is not None]
        for t in range(clip.frames)
    ]


def render_samples_page(root):
    st.title("Samples")
    runs = list_runs(str(root))
    runs = runs[runs['kind'] == 'clips'] if not runs.empty else runs
    if runs.empty:
        st.info("No clip trees (gen or sample output) under this root.")
        return

    run = st.selectbox("Run", runs['run'].tolist())
    clips = list_clips(runs.loc[runs['run'] == run, 'path'].iloc[0])
    if not clips:
        st.warning("This run holds no frame sequences.")
        return
    show_boxes = st.checkbox("Overlay annotation boxes", value=True)

    for clip_dir in clips[:st.number_input("Clips to show", 1, len(clips), min(4, len(clips)))]:
        clip, pixels = load_clip(clip_dir)
        report = grounding_miou(clip, pixels)
        title = f"{clip_dir.rsplit('/', 1)[-1]}  |  mean IoU {report.mean_iou:.3f}"
        boxes = annotation_overlay(clip) if show_boxes else None
        st.plotly_chart(create_frame_strip(pixels, boxes, title), use_container_width=True)
