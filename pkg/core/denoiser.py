"""
Denoiser Module
eps_theta(z_t; t, y): a flat stack of transformer blocks wiring spatial attention,
gated self-attention over location tokens, temporal attention and gated cross-attention
over enhanced instance features, plus two-stage training and guided sampling
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, List, Optional

import numpy as np
from tqdm import tqdm

from core.attention import (
    AttentionParams,
    GateParam,
    gated_cross_attention,
    gated_self_attention,
    init_attention,
    self_attention,
    temporal_attention,
)
from core.conditioning import ConditioningParams, assign_slots, clip_location_tokens, init_conditioning
from core.diffusion import (
    DEFAULT_COND_DROP,
    DEFAULT_GUIDANCE,
    DEFAULT_SAMPLE_STEPS,
    ancestral_sample,
    cfg_combine,
    make_schedule,
    respace,
    training_loss,
)
from core.errors import ConfigError, ContractError, NumericError
from core.instance_enhancer import EnhancerParams, enhance_all, init_enhancer
from core.tensor_core import (
    Tensor,
    add,
    concat,
    layer_norm,
    load_checkpoint,
    make_rng,
    matmul,
    no_grad,
    ones,
    reshape,
    save_checkpoint,
    silu,
    transpose,
    zeros,
)

logger = logging.getLogger(__name__)

STAGES = ('image', 'video')
ENHANCER_POSITIONS = ('encoder', 'decoder')
INSTANCE_FUSIONS = ('gated_cross', 'gated_self')
MOTION_FUSIONS = ('concat', 'add')


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class DenoiserConfig:
    """
    Latent extents, width and the ablation switches of the denoiser.

    The image stage has no temporal attention and no instance enhancer; its frames are
    processed independently so any clip length is accepted.
    """
    frames: int = 8
    height: int = 8
    width: int = 8
    channels: int = 48
    dim: int = 64
    n_blocks: int = 2
    n_encoder_blocks: int = 1
    n_heads: int = 4
    mlp_ratio: int = 2
    stage: str = 'video'
    enhancer_position: str = 'decoder'
    instance_fusion: str = 'gated_cross'
    motion_fusion: str = 'concat'
    use_instance_embedding: bool = True
    use_enhancer: bool = True
    use_motion: bool = True
    n_freq: int = 8
    roi_size: int = 4
    k_max: int = 8
    n_categories: int = 8

    def __post_init__(self):
        choices = {
            'stage': STAGES,
            'enhancer_position': ENHANCER_POSITIONS,
            'instance_fusion': INSTANCE_FUSIONS,
            'motion_fusion': MOTION_FUSIONS,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ('frames', 'height', 'width', 'channels', 'dim', 'n_blocks', 'n_heads',
                    'mlp_ratio', 'n_freq', 'roi_size', 'k_max', 'n_categories'):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if not 0 <= self.n_encoder_blocks <= self.n_blocks:
            raise ConfigError(f"n_encoder_blocks must lie in [0, {self.n_blocks}], got {self.n_encoder_blocks}")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")

    @property
    def temporal(self):
        return self.stage == 'video'

    def enhancer_blocks(self):
        """Indices of the blocks that carry the instance enhancer and its fusion layer"""
        if not (self.temporal and self.use_enhancer):
            return []
        if self.enhancer_position == 'encoder':
            return list(range(self.n_encoder_blocks))
        return list(range(self.n_encoder_blocks, self.n_blocks))

    def with_stage(self, stage):
        return replace(self, stage=stage)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown denoiser keys: {', '.join(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class OptimizerConfig:
    """Momentum SGD on the epsilon-prediction loss"""
    lr: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 1.0
    batch_size: int = 4
    cond_drop: float = DEFAULT_COND_DROP
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0.0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"invalid optimizer lr={self.lr} momentum={self.momentum}")
        if self.batch_size < 1 or self.log_every < 1 or self.grad_clip < 0.0:
            raise ConfigError("batch_size and log_every must be >= 1, grad_clip >= 0")
        if not 0.0 <= self.cond_drop <= 1.0:
            raise ConfigError(f"cond_drop must lie in [0, 1], got {self.cond_drop}")


# ============================================================================
# PARAMETERS
# ============================================================================

def _dense(rng, fan_in, fan_out):
    return Tensor(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in), requires_grad=True)


def init_params(cfg, rng):
    """
    Fresh parameters for a configuration.

    Stage-image names are a subset of stage-video names with identical shapes.
    Gates start at zero and the video-only temporal layers start with a zero output
    projection, so a stage-video model initialized from a stage-image checkpoint
    reproduces it exactly.

    Args:
        cfg: DenoiserConfig
        rng: numpy Generator (or an int seed)

    Returns:
        dict[str, Tensor]
    """
    rng = make_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    dim, channels, hidden = cfg.dim, cfg.channels, cfg.dim * cfg.mlp_ratio
    params = {
        'embed.w_in': _dense(rng, channels, dim),
        'embed.b_in': zeros((dim,), requires_grad=True),
        'embed.pos': Tensor(rng.standard_normal((cfg.height * cfg.width, dim)) * 0.1, requires_grad=True),
        'time.w': _dense(rng, dim, dim),
        'time.b': zeros((dim,), requires_grad=True),
        'caption': zeros((dim,), requires_grad=True),
    }
    params.update(init_conditioning(rng, dim, cfg.n_categories, cfg.k_max, cfg.n_freq))

    for b in range(cfg.n_blocks):
        prefix = f'blocks.{b}'
        params.update(init_attention(rng, dim, f'{prefix}.spatial'))
        params.update(init_attention(rng, dim, f'{prefix}.gsa'))
        params[f'{prefix}.gsa_gate'] = zeros((1,), requires_grad=True)
        params[f'{prefix}.mlp.norm_gain'] = ones((dim,), requires_grad=True)
        params[f'{prefix}.mlp.norm_bias'] = zeros((dim,), requires_grad=True)
        params[f'{prefix}.mlp.w1'] = _dense(rng, dim, hidden)
        params[f'{prefix}.mlp.b1'] = zeros((hidden,), requires_grad=True)
        params[f'{prefix}.mlp.w2'] = _dense(rng, hidden, dim)
        params[f'{prefix}.mlp.b2'] = zeros((dim,), requires_grad=True)

    params['out.norm_gain'] = ones((dim,), requires_grad=True)
    params['out.norm_bias'] = zeros((dim,), requires_grad=True)
    params['out.w'] = _dense(rng, dim, channels)
    params['out.b'] = zeros((channels,), requires_grad=True)

    # video-only layers are drawn after every shared one so the shared draws do not depend on the stage
    if cfg.temporal:
        enhanced = set(cfg.enhancer_blocks())
        for b in range(cfg.n_blocks):
            prefix = f'blocks.{b}'
            params.update(init_attention(rng, dim, f'{prefix}.temporal', zero_output=True))
            if b in enhanced:
                params.update(init_enhancer(rng, dim, dim, f'{prefix}.enhancer', cfg.n_freq))
                params.update(init_attention(rng, dim, f'{prefix}.fuse', cross=True))
                params[f'{prefix}.fuse_gate'] = zeros((1,), requires_grad=True)
    return params


def merge_params(fresh, loaded):
    """
    Overwrite fresh parameters with loaded ones of the same name.

    Raises:
        ConfigError: a loaded name is unknown to the configuration or its shape differs
    """
    merged = dict(fresh)
    for name, value in loaded.items():
        if name not in fresh:
            raise ConfigError(f"checkpoint parameter {name!r} does not exist in this configuration")
        if value.shape != fresh[name].shape:
            raise ConfigError(f"checkpoint parameter {name!r} has shape {value.shape}, expected {fresh[name].shape}")
        merged[name] = Tensor(value.data, requires_grad=True)
    return merged


def save_model(path, params, cfg, extra=None):
    """Checkpoint with the DenoiserConfig in the header metadata"""
    metadata = {'denoiser': cfg.to_dict()}
    if extra:
        metadata.update(extra)
    return save_checkpoint(path, params, metadata)


def load_model(path):
    """
    Returns:
        tuple: (params, DenoiserConfig, metadata dict)
    """
    params, metadata = load_checkpoint(path)
    if not metadata or 'denoiser' not in metadata:
        raise ConfigError(f"{path} carries no denoiser configuration")
    return params, DenoiserConfig.from_dict(metadata['denoiser']), metadata


# ============================================================================
# FORWARD PASS
# ============================================================================

def timestep_embedding(step, dim):
    """Sinusoidal features of a diffusion step, np.ndarray[dim]"""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = float(step) * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


def _linear(x, w, b):
    return add(matmul(x, w), b)


def _pointwise_mlp(h, params, prefix):
    normed = layer_norm(h, params[f'{prefix}.norm_gain'], params[f'{prefix}.norm_bias'])
    inner = silu(_linear(normed, params[f'{prefix}.w1'], params[f'{prefix}.b1']))
    return add(h, _linear(inner, params[f'{prefix}.w2'], params[f'{prefix}.b2']))


def _check_input(z_t, clip, cfg):
    if z_t.ndim != 4:
        raise ContractError(f"denoiser expects [T, H, W, C], got {z_t.shape}")
    frames, height, width, channels = z_t.shape
    if (height, width, channels) != (cfg.height, cfg.width, cfg.channels):
        raise ContractError(
            f"latent {z_t.shape} does not match config ({cfg.height}, {cfg.width}, {cfg.channels})"
        )
    if cfg.temporal and frames != cfg.frames:
        raise ContractError(f"video stage expects {cfg.frames} frames, got {frames}")
    if clip is not None and clip.frames != frames:
        raise ContractError(f"clip has {clip.frames} frames, latent has {frames}")


def denoiser_forward(z_t, t, clip, cfg, params):
    """
    Noise prediction for one clip.

    Args:
        z_t: Tensor[T, H, W, C] noisy latent
        t: Diffusion step number (1-based)
        clip: ClipAnnotation, or None for the unconditional branch
        cfg: DenoiserConfig
        params: dict[str, Tensor]

    Returns:
        Tensor[T, H, W, C]
    """
    _check_input(z_t, clip, cfg)
    frames, height, width, channels = z_t.shape
    dim, n_heads, positions = cfg.dim, cfg.n_heads, height * width

    h = _linear(reshape(z_t, (frames, positions, channels)), params['embed.w_in'], params['embed.b_in'])
    h = add(h, params['embed.pos'])
    temb = _linear(Tensor(timestep_embedding(t, dim)[None, :]), params['time.w'], params['time.b'])
    h = add(h, temb)

    loc, loc_mask, slots = None, None, None
    if clip is not None and clip.tracklets:
        slots = assign_slots(clip)
        grid = clip_location_tokens(
            clip, ConditioningParams.from_params(params, n_freq=cfg.n_freq), slots,
            use_instance_embedding=cfg.use_instance_embedding,
        )
        # per-frame condition sets [T, n, dim]
        loc = transpose(grid.values, (1, 0, 2))
        loc_mask = grid.present.T
    if clip is not None and clip.caption:
        # one caption token per frame, gated together with the location tokens
        caption = add(zeros((frames, 1, dim)), params['caption'])
        caption_mask = np.ones((frames, 1), dtype=bool)
        if loc is None:
            loc, loc_mask = caption, caption_mask
        else:
            loc, loc_mask = concat([loc, caption], axis=1), np.concatenate([loc_mask, caption_mask], axis=1)

    enhanced = set(cfg.enhancer_blocks())
    for b in range(cfg.n_blocks):
        prefix = f'blocks.{b}'
        h = self_attention(h, AttentionParams.from_params(params, f'{prefix}.spatial', n_heads))
        h = gated_self_attention(
            h, loc, AttentionParams.from_params(params, f'{prefix}.gsa', n_heads),
            GateParam(params[f'{prefix}.gsa_gate']), loc_mask,
        )
        if cfg.temporal:
            grid4 = reshape(h, (frames, height, width, dim))
            grid4 = temporal_attention(grid4, AttentionParams.from_params(params, f'{prefix}.temporal', n_heads))
            h = reshape(grid4, (frames, positions, dim))
        if b in enhanced and clip is not None:
            h = _fuse_instances(h, clip, slots, cfg, params, prefix)
        h = _pointwise_mlp(h, params, f'{prefix}.mlp')

    h = layer_norm(h, params['out.norm_gain'], params['out.norm_bias'])
    out = _linear(h, params['out.w'], params['out.b'])
    return reshape(out, (frames, height, width, channels))


def _fuse_instances(h, clip, slots, cfg, params, prefix):
    frames, positions, dim = h.shape
    enhancer = EnhancerParams.from_params(
        params, f'{prefix}.enhancer', cfg.n_heads,
        n_freq=cfg.n_freq, roi_size=cfg.roi_size,
        motion_fusion=cfg.motion_fusion, use_motion=cfg.use_motion,
    )
    latent = reshape(h, (frames, cfg.height, cfg.width, dim))
    tokens = enhance_all(latent, clip, enhancer, slots, k_max=cfg.k_max)
    # every instance and the background form one joint context for all T*H*W visual tokens
    visual = reshape(h, (frames * positions, dim))
    fuse = AttentionParams.from_params(params, f'{prefix}.fuse', cfg.n_heads)
    gate = GateParam(params[f'{prefix}.fuse_gate'])
    if cfg.instance_fusion == 'gated_cross':
        fused = gated_cross_attention(visual, tokens.values, fuse, gate, tokens.mask)
    else:
        fused = gated_self_attention(visual, tokens.values, fuse, gate, tokens.mask)
    return reshape(fused, (frames, positions, dim))


class Denoiser:
    """Callable eps_theta bound to a configuration and parameter dict"""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    def __call__(self, z_t, t, clip):
        return denoiser_forward(z_t, t, clip, self.cfg, self.params)


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class TrainResult:
    params: dict
    losses: List[float] = field(default_factory=list)
    cfg: Optional[DenoiserConfig] = None


def _global_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def train_stage(dataset, cfg, steps, opt=None, sched=None, init=None, seed=0,
                allow_cold_start=False, progress=False, on_log: Optional[Callable] = None):
    """
    Train one stage with momentum SGD.

    Args:
        dataset: sequence of (ClipAnnotation, latent np.ndarray[T, H, W, C]) pairs
        cfg: DenoiserConfig (its stage selects image or video training)
        steps: Number of optimizer steps (0 returns the initialization)
        opt: OptimizerConfig
        sched: NoiseSchedule for training (default: 1000-step linear)
        init: Optional parameter dict from an earlier stage
        seed: Seeds both the initialization and the batch/noise stream
        allow_cold_start: Permit stage video without init
        progress: Show a tqdm bar
        on_log: Optional callback(step, loss) every opt.log_every steps

    Returns:
        TrainResult with the final parameters and the per-step loss trace

    Raises:
        ConfigError: stage video without init (unless allow_cold_start)
        NumericError: the loss became NaN or infinite
    """
    opt = opt or OptimizerConfig()
    sched = sched or make_schedule()
    if cfg.stage == 'video' and init is None and not allow_cold_start:
        raise ConfigError("stage 'video' needs an image-stage checkpoint (pass init or allow_cold_start)")
    if steps > 0 and not dataset:
        raise ConfigError("training needs at least one clip")

    init_rng, data_rng = (np.random.Generator(np.random.PCG64(s))
                          for s in np.random.SeedSequence(seed).spawn(2))
    params = init_params(cfg, init_rng)
    if init is not None:
        params = merge_params(params, init)
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    losses = []

    bar = tqdm(range(steps), desc=f'train[{cfg.stage}]', disable=not progress)
    for step in bar:
        picks = data_rng.integers(0, len(dataset), size=opt.batch_size)
        z0s, clips = [], []
        for k in picks:
            clip, latent = dataset[int(k)]
            if cfg.stage == 'image':
                frame = int(data_rng.integers(0, clip.frames))
                z0s.append(latent[frame:frame + 1])
                clips.append(clip.frame_slice(frame))
            else:
                z0s.append(latent)
                clips.append(clip)

        model = Denoiser(cfg, params)
        loss = training_loss(model, z0s, clips, sched, data_rng, cond_drop=opt.cond_drop)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"loss is {value} at step {step}")
        loss.backward()

        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
        norm = _global_norm(grads)
        factor = opt.grad_clip / norm if opt.grad_clip > 0.0 and norm > opt.grad_clip else 1.0
        updated = {}
        for name, p in params.items():
            velocity[name] = opt.momentum * velocity[name] + factor * grads[name]
            updated[name] = Tensor(p.data - opt.lr * velocity[name], requires_grad=True)
        params = updated

        losses.append(value)
        if (step + 1) % opt.log_every == 0:
            recent = float(np.mean(losses[-opt.log_every:]))
            logger.info("stage=%s step=%d loss=%.5f grad_norm=%.3f", cfg.stage, step + 1, recent, norm)
            bar.set_postfix(loss=f'{recent:.4f}')
            if on_log is not None:
                on_log(step + 1, recent)
    return TrainResult(params=params, losses=losses, cfg=cfg)


# ============================================================================
# SAMPLING
# ============================================================================

@dataclass
class SampleResult:
    latent: np.ndarray
    frames: Optional[np.ndarray] = None


def sample_clip(clip, params, cfg, guidance=DEFAULT_GUIDANCE, seed=0, sample_steps=DEFAULT_SAMPLE_STEPS,
                sched=None, decode=None, progress=False):
    """
    Generate a latent clip for a tracklet annotation with classifier-free guidance.

    Args:
        clip: ClipAnnotation
        params: dict[str, Tensor] (e.g. from load_model)
        cfg: DenoiserConfig
        guidance: CFG scale; 1 skips the unconditional pass, 0 skips the conditional one
        seed: Seeds the initial latent and every ancestral noise draw
        sample_steps: Length of the respaced schedule
        sched: Training NoiseSchedule (default: 1000-step linear)
        decode: Optional callable latent -> frames

    Returns:
        SampleResult
    """
    sched = respace(sched or make_schedule(), sample_steps)
    frames = clip.frames if cfg.stage == 'image' else cfg.frames
    shape = (frames, cfg.height, cfg.width, cfg.channels)
    rng = make_rng(seed)

    def eps_fn(z, step):
        z = Tensor(z)
        cond = denoiser_forward(z, step, clip, cfg, params).data if guidance != 0.0 else None
        if guidance == 1.0:
            return cond
        uncond = denoiser_forward(z, step, None, cfg, params).data
        if cond is None:
            return uncond
        return cfg_combine(cond, uncond, guidance)

    with no_grad():
        latent = ancestral_sample(eps_fn, shape, sched, rng, progress=progress)
    return SampleResult(latent=latent, frames=decode(latent) if decode is not None else None)
