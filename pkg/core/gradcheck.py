"""
Gradient Check Suite
Central finite-difference checks of every differentiable operation and of a miniature denoiser
"""

import logging
from dataclasses import dataclass

import numpy as np

from core.attention import (
    AttentionParams,
    GateParam,
    cross_attention,
    gated_cross_attention,
    gated_self_attention,
    init_attention,
    self_attention,
    temporal_attention,
)
from core.conditioning import ConditioningParams, clip_location_tokens, init_conditioning
from core.denoiser import DenoiserConfig, denoiser_forward, init_params
from core.diffusion import make_schedule, training_loss
from core.geometry import Box, roi_align, roi_align_frames
from core.instance_enhancer import (
    EnhancerParams,
    enhance_instance,
    extract_instance_cube,
    init_enhancer,
    motion_extract,
)
from core.tensor_core import (
    Tensor,
    grad_check,
    grad_check_params,
    layer_norm,
    make_rng,
    matmul,
    mul,
    silu,
    softmax_lastdim,
    tanh,
    total,
)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
FD_STEP = 1e-5

# small widths keep every case well under a second
DIM = 8
HEADS = 2


@dataclass
class CheckResult:
    module: str
    case: str
    max_rel_err: float

    @property
    def passed(self):
        return bool(self.max_rel_err < TOLERANCE)


@dataclass
class _Clip:
    """Minimal annotation view: frames plus tracklets"""
    frames: int
    tracklets: tuple
    caption: str = None


@dataclass
class _Track:
    instance_id: int
    category_id: int
    boxes: tuple


def _fixed_weights(rng, shape):
    # fixed random readout so sums of normalized outputs do not vanish
    return Tensor(rng.standard_normal(shape))


def _readout(out, weights):
    return total(mul(out, weights))


def _gated(params, names, value=0.5):
    # open the zero-initialized gates so the gated branches carry gradient
    out = dict(params)
    for name in names:
        out[name] = Tensor(np.full(params[name].shape, value), requires_grad=True)
    return out


def _tracks(frames):
    boxes_a = tuple(Box(0.1 + 0.05 * t, 0.2, 0.45 + 0.05 * t, 0.6) for t in range(frames))
    boxes_b = tuple(None if t == 1 else Box(0.5, 0.1 + 0.04 * t, 0.9, 0.5 + 0.04 * t) for t in range(frames))
    return (_Track(3, 1, boxes_a), _Track(7, 4, boxes_b))


# ============================================================================
# CASES
# ============================================================================

def _tensor_ops(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    w = _fixed_weights(rng, (5, 4))
    gain, bias = _fixed_weights(rng, (5,)), _fixed_weights(rng, (5,))
    readout = _fixed_weights(rng, (3, 4))
    yield 'layer_norm', grad_check(lambda v: _readout(layer_norm(v, gain, bias), _fixed_weights(make_rng(1), (3, 5))), x)
    yield 'softmax', grad_check(lambda v: _readout(softmax_lastdim(v), _fixed_weights(make_rng(2), (3, 5))), x)
    yield 'silu_tanh_matmul', grad_check(lambda v: _readout(tanh(matmul(silu(v), w)), readout), x)


def _geometry(rng):
    feat = Tensor(rng.standard_normal((5, 6, 3)))
    box = Box(0.13, 0.21, 0.77, 0.9)
    yield 'roi_align', grad_check(lambda v: _readout(roi_align(v, box, 3), _fixed_weights(make_rng(3), (3, 3, 3))), feat)
    latent = Tensor(rng.standard_normal((2, 4, 4, 3)))
    fill = Tensor(rng.standard_normal(3))
    yield 'roi_align_frames', grad_check(
        lambda v: _readout(roi_align_frames(v, [box, None], 2, fill), _fixed_weights(make_rng(4), (2, 2, 2, 3))), latent)


def _conditioning(rng):
    params = init_conditioning(rng, DIM, n_categories=5, k_max=4, n_freq=2)
    clip = _Clip(3, _tracks(3))
    readout = _fixed_weights(rng, (2, 3, DIM))

    def loss(p):
        grid = clip_location_tokens(clip, ConditioningParams.from_params(p, n_freq=2))
        return _readout(grid.values, readout)

    yield 'location_tokens', max(grad_check_params(loss, params, h=FD_STEP, rng=rng).values())


def _attention(rng):
    params = init_attention(rng, DIM, 'attn', cross=True)
    x = Tensor(rng.standard_normal((2, 5, DIM)))
    ctx = Tensor(rng.standard_normal((2, 3, DIM)))
    mask = np.array([[True, False, True], [True, True, True]])
    readout = _fixed_weights(rng, (2, 5, DIM))
    beta = Tensor(np.array([0.7]))

    def attn(p):
        return AttentionParams.from_params(p, 'attn', HEADS)

    yield 'self_attention', max(grad_check_params(
        lambda p: _readout(self_attention(x, attn(p)), readout), params, rng=rng).values())
    yield 'cross_attention', max(grad_check_params(
        lambda p: _readout(cross_attention(x, ctx, attn(p), mask), readout), params, rng=rng).values())
    yield 'gated_self_attention', grad_check(
        lambda v: _readout(gated_self_attention(v, ctx, attn(params), GateParam(beta), mask), readout), x)
    yield 'gated_cross_attention', grad_check(
        lambda v: _readout(gated_cross_attention(x, v, attn(params), GateParam(beta), mask), readout), ctx)
    latent = Tensor(rng.standard_normal((3, 2, 2, DIM)))
    yield 'temporal_attention', grad_check(
        lambda v: _readout(temporal_attention(v, attn(params)), _fixed_weights(make_rng(5), (3, 2, 2, DIM))), latent)


def _enhancer(rng):
    channels = 3
    params = init_enhancer(rng, channels, DIM, 'enh', n_freq=2)
    latent = Tensor(rng.standard_normal((3, 4, 4, channels)))
    track = _tracks(3)[1]
    for fusion in ('concat', 'add'):
        def loss(p, fusion=fusion):
            enh = EnhancerParams.from_params(p, 'enh', HEADS, n_freq=2, roi_size=2, motion_fusion=fusion)
            cube = extract_instance_cube(latent, track, enh.roi_size, enh.absent_feature)
            tokens = enhance_instance(cube, motion_extract(track.boxes, enh), enh)
            return _readout(tokens, _fixed_weights(make_rng(6), tokens.shape))

        yield f'enhance_instance_{fusion}', max(grad_check_params(loss, params, rng=rng).values())


def _denoiser(rng, coords_per_param=2):
    cfg = DenoiserConfig(frames=2, height=4, width=4, channels=4, dim=2 * DIM, n_blocks=1, n_encoder_blocks=0,
                         n_heads=HEADS, mlp_ratio=2, n_freq=2, roi_size=2, k_max=4, n_categories=5)
    params = init_params(cfg, rng)
    gates = [name for name in params if name.endswith('_gate')]
    params = _gated(params, gates)
    for name in params:
        if name.endswith('temporal.w_o'):
            params[name] = Tensor(rng.standard_normal(params[name].shape) / np.sqrt(cfg.dim), requires_grad=True)
    clip = _Clip(2, _tracks(2), caption='two boxes')
    z_t = Tensor(rng.standard_normal((2, 4, 4, 4)))
    readout = _fixed_weights(rng, (2, 4, 4, 4))

    def loss(p):
        return _readout(denoiser_forward(z_t, 17, clip, cfg, p), readout)

    yield 'denoiser_forward', max(grad_check_params(
        loss, params, h=FD_STEP, coords_per_param=coords_per_param, rng=rng).values())

    z0 = rng.standard_normal((2, 4, 4, 4))
    sched = make_schedule(100)
    draw_seed = int(rng.integers(2 ** 31))

    def objective(p):
        # same timestep and noise draws on every evaluation
        return training_loss(lambda z, step, c: denoiser_forward(z, step, c, cfg, p), [z0], [clip], sched,
                             make_rng(draw_seed), cond_drop=0.0)

    yield 'training_loss', max(grad_check_params(
        objective, params, h=FD_STEP, coords_per_param=coords_per_param, rng=rng).values())


SUITE = {
    'tensor_core': _tensor_ops,
    'geometry': _geometry,
    'conditioning': _conditioning,
    'attention': _attention,
    'instance_enhancer': _enhancer,
    'denoiser': _denoiser,
}


def run_suite(seed=0, modules=None):
    """
    Run every gradient case.

    Args:
        seed: Seeds the inputs and the coordinates picked per parameter
        modules: Optional subset of SUITE keys

    Returns:
        list of CheckResult in suite order
    """
    results = []
    for module in modules or SUITE:
        rng = make_rng([seed, list(SUITE).index(module)])
        for case, err in SUITE[module](rng):
            results.append(CheckResult(module, case, float(err)))
            logger.debug("gradcheck %s.%s max_rel_err=%.3e", module, case, err)
    return results
