"""
Tracklet Diffusion Run Viewer
Main application file with navigation and page routing

Read-only Streamlit viewer over the output directories of cli.py
"""

import sys
from pathlib import Path

import streamlit as st

# Add utils and pages to path
sys.path.append(str(Path(__file__).parent))

from utils.data_loader import DEFAULT_ROOT
from page_modules import home, training, samples, evaluation


# Page configuration
st.set_page_config(
    page_title="Tracklet Diffusion Runs",
    page_icon="🎞️",
    layout="wide",
    initial_sidebar_state="expanded"
)

PAGES = {
    'home': ('🏠 Runs', home.render_home_page),
    'training': ('📉 Training', training.render_training_page),
    'samples': ('🎞️ Samples', samples.render_samples_page),
    'evaluation': ('🎯 Evaluation', evaluation.render_evaluation_page),
}


def initialize_session_state():
    """Initialize session state variables"""
    if 'current_page' not in st.session_state:
        st.session_state.current_page = 'home'
    if 'root' not in st.session_state:
        st.session_state.root = str(DEFAULT_ROOT)


def render_sidebar():
    """Output root picker and page navigation"""
    with st.sidebar:
        st.markdown("### Tracklet Diffusion")
        st.session_state.root = st.text_input("Output root", st.session_state.root)
        if st.button("Reload", use_container_width=True):
            st.cache_data.clear()

        st.markdown("---")
        for key, (label, _) in PAGES.items():
            kind = "primary" if st.session_state.current_page == key else "secondary"
            if st.button(label, key=f"nav_{key}", use_container_width=True, type=kind):
                st.session_state.current_page = key
                st.rerun()


def main():
    initialize_session_state()
    render_sidebar()
    root = Path(st.session_state.root).expanduser()
    _, render = PAGES[st.session_state.current_page]
    render(root)


if __name__ == "__main__":
    main()
