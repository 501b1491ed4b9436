"""
Training Page
Loss traces of one or more training runs
"""

import pandas as pd
import streamlit as st

from utils.data_loader import list_runs, load_loss
from utils.visualizations import create_loss_curve


def render_training_page(root):
    st.title("Training")
    runs = list_runs(str(root))
    runs = runs[runs['kind'] == 'training'] if not runs.empty else runs
    if runs.empty:
        st.info("No training runs (directories with loss.csv) under this root.")
        return

    chosen = st.multiselect("Runs", runs['run'].tolist(), default=runs['run'].tolist()[:2])
    window = st.slider("Rolling mean window", 1, 500, 50)
    if not chosen:
        return

    frames, offset = [], 0
    for name in chosen:
        df = load_loss(runs.loc[runs['run'] == name, 'path'].iloc[0]).copy()
        # consecutive stages share one step axis
        df['step'] = df['step'] + offset
        offset = int(df['step'].max()) if len(df) else offset
        df['stage'] = f"{name} [{df['stage'].iloc[0]}]" if len(df) else name
        frames.append(df)
    losses = pd.concat(frames, ignore_index=True)
    st.plotly_chart(create_loss_curve(losses, window=window), use_container_width=True)

    summary = losses.groupby('stage', sort=False)['loss'].agg(['count', 'first', 'last', 'min'])
    summary.columns = ['steps', 'first loss', 'final loss', 'best loss']
    st.dataframe(summary, use_container_width=True)
