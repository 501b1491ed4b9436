"""
Run Data Loader Module
Cached readers for the output directories written by the command-line tool
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import streamlit as st
import yaml

from utils.run_config import RESOLVED_NAME
from utils.trackdata import INDEX_NAME, read_annotation, read_frames

DEFAULT_ROOT = Path(__file__).parent.parent / "runs"

# File that marks each kind of output directory
RUN_MARKERS = {
    'ablation': 'ablation.csv',
    'evaluation': 'report.json',
    'training': 'loss.csv',
}


def run_kind(run_dir):
    """Kind of output directory: training, evaluation, ablation, or clips (gen / sample trees)"""
    run_dir = Path(run_dir)
    for kind, marker in RUN_MARKERS.items():
        if (run_dir / marker).exists():
            return kind
    if any(run_dir.glob('clip_*')):
        return 'clips'
    return 'other'


@st.cache_data(ttl=3600)
def list_runs(root):
    """Every directory under root carrying a resolved run config"""
    root = Path(root)
    if not root.exists():
        return pd.DataFrame(columns=['run', 'kind', 'path', 'modified'])
    rows = []
    for config in sorted(root.rglob(RESOLVED_NAME)):
        run_dir = config.parent
        rows.append({
            'run': str(run_dir.relative_to(root)) if run_dir != root else '.',
            'kind': run_kind(run_dir),
            'path': str(run_dir),
            'modified': pd.Timestamp(config.stat().st_mtime, unit='s'),
        })
    return pd.DataFrame(rows, columns=['run', 'kind', 'path', 'modified'])


@st.cache_data(ttl=3600)
def load_run_config(run_dir):
    with open(Path(run_dir) / RESOLVED_NAME, encoding='utf-8') as file:
        return yaml.safe_load(file) or {}


@st.cache_data(ttl=3600)
def load_loss(run_dir):
    """loss.csv with an added stage column taken from the run config"""
    df = pd.read_csv(Path(run_dir) / 'loss.csv')
    df['stage'] = load_run_config(run_dir).get('stage', 'loss')
    return df


@st.cache_data(ttl=3600)
def load_report(run_dir):
    return json.loads((Path(run_dir) / 'report.json').read_text(encoding='utf-8'))


def report_iou_frame(clip_report):
    """per-frame IoU of one clip entry of report.json as an instances x frames DataFrame"""
    return pd.DataFrame(clip_report['per_frame_iou'], index=clip_report['instance_ids'], dtype=float)


@st.cache_data(ttl=3600)
def load_similarity(run_dir):
    path = Path(run_dir) / 'instance_similarity.csv'
    if not path.exists():
        return None
    return pd.read_csv(path, index_col='slot')


@st.cache_data(ttl=3600)
def load_ablation(run_dir):
    run_dir = Path(run_dir)
    table = pd.read_csv(run_dir / 'ablation.csv')
    verdicts = json.loads((run_dir / 'ablation.json').read_text(encoding='utf-8')).get('orderings', [])
    return table, pd.DataFrame(verdicts)


def list_clips(run_dir):
    return sorted(str(p) for p in Path(run_dir).glob('clip_*') if (p / 'frames' / INDEX_NAME).exists())


@st.cache_data(ttl=3600)
def load_clip(clip_dir):
    """
    Returns:
        tuple: (ClipAnnotation, pixels np.ndarray [T, h, w, 3])
    """
    clip_dir = Path(clip_dir)
    clip = read_annotation(clip_dir / 'annotation.json')
    frames = read_frames(clip_dir / 'frames' / INDEX_NAME)
    return clip, np.asarray(frames.pixels)
