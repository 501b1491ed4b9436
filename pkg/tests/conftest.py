"""Shared fixtures: tiny denoiser configurations and hand-built clips"""

import pytest

from core.denoiser import DenoiserConfig
from core.geometry import Box
from core.tensor_core import make_rng
from utils.trackdata import ClipAnnotation, Tracklet, encode_frames, gen_dataset


@pytest.fixture
def rng():
    return make_rng(0)


@pytest.fixture
def tiny_cfg():
    """4x4 frames, patch 2 -> latent [3, 2, 2, 12]"""
    return DenoiserConfig(frames=3, height=2, width=2, channels=12, dim=8, n_blocks=2, n_encoder_blocks=1,
                          n_heads=2, mlp_ratio=2, n_freq=2, roi_size=2, k_max=4, n_categories=8)


@pytest.fixture
def tiny_dataset():
    pairs = gen_dataset(3, 4, 2, frames=3, width=4, height=4)
    return [(clip, encode_frames(frames, patch=2)) for clip, frames in pairs]


@pytest.fixture
def make_clip():
    """
    Build a ClipAnnotation from {instance_id: (category, [box tuple or None per frame])}
    """
    def build(tracks, frames=None, width=8, height=8, caption=None):
        tracklets = []
        for instance_id, (category, boxes) in tracks.items():
            parsed = tuple(None if b is None else Box(*b) for b in boxes)
            tracklets.append(Tracklet(instance_id, category, parsed))
        if frames is None:
            frames = len(tracklets[0].boxes) if tracklets else 1
        return ClipAnnotation(frames, width, height, tuple(tracklets), caption)

    return build


@pytest.fixture
def moving_pair(make_clip):
    """Two instances over 3 frames; the second one is absent at frame 1"""
    return make_clip({
        3: (1, [(0.1, 0.2, 0.5, 0.6), (0.2, 0.2, 0.6, 0.6), (0.3, 0.2, 0.7, 0.6)]),
        7: (4, [(0.5, 0.1, 0.9, 0.5), None, (0.5, 0.3, 0.9, 0.7)]),
    })
