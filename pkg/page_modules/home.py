"""
Home Page
Run browser: every output directory under the root with its resolved config
"""

import pandas as pd
import streamlit as st

from utils.data_loader import list_runs, load_run_config

# Config keys shown first in the run summary
SUMMARY_KEYS = ['seed', 'stage', 'clips', 'frames', 'width', 'height', 'instances',
                'steps', 'guidance', 'instance_fusion', 'enhancer_position']


def render_home_page(root):
    """Render the run list and the config of the selected run"""
    st.title("Tracklet Diffusion Runs")
    st.caption(f"Output root: `{root}`")

    runs = list_runs(str(root))
    if runs.empty:
        st.info("No runs found. Create one with `python cli.py gen --out runs/data`.")
        return

    counts = runs['kind'].value_counts()
    cols = st.columns(len(counts))
    for col, (kind, count) in zip(cols, counts.items()):
        col.metric(kind.title(), int(count))

    st.dataframe(runs[['run', 'kind', 'modified']], use_container_width=True, hide_index=True)

    choice = st.selectbox("Inspect run config", runs['run'].tolist())
    config = load_run_config(runs.loc[runs['run'] == choice, 'path'].iloc[0])
    first = [k for k in SUMMARY_KEYS if k in config]
    rest = sorted(k for k in config if k not in SUMMARY_KEYS)
    table = pd.DataFrame({'key': first + rest, 'value': [str(config[k]) for k in first + rest]})
    st.dataframe(table, use_container_width=True, hide_index=True)
