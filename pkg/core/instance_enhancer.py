"""
Temporal Instance Enhancer
ROIAligned per-instance feature cubes, trajectory motion tokens and the
self-attention that runs along each instance's own timeline
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from core.attention import AttentionParams, DEFAULT_N_HEADS, init_attention, self_attention
from core.conditioning import DEFAULT_K_MAX, assign_slots
from core.errors import CapacityError, ContractError
from core.geometry import (
    DEFAULT_N_FREQ,
    DEFAULT_ROI_SIZE,
    fourier_embed_many,
    full_frame_box,
    roi_align_frames,
)
from core.tensor_core import Tensor, add, concat, gather_rows, matmul, reshape, zeros

MOTION_FUSIONS = ('concat', 'add')


@dataclass
class InstanceFeatureCube:
    """F_i: ROIAlign outputs stacked over time, Tensor[T, r, r, C]"""
    values: Tensor
    presence: np.ndarray

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def roi_size(self):
        return self.values.shape[1]


@dataclass
class MotionRep:
    """P_i: one motion token per frame, Tensor[T, dim]"""
    values: Tensor
    presence: np.ndarray


@dataclass
class EnhancedTokens:
    """Enhanced token sets, instances in slot order followed by the background"""
    sets: List[Tensor] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.sets)

    @property
    def values(self):
        """All token sets flattened into one context, Tensor[K, dim]"""
        return concat(self.sets, axis=0)

    @property
    def mask(self):
        return np.concatenate(self.masks)


@dataclass
class EnhancerParams:
    w_in: Tensor
    b_in: Tensor
    absent_feature: Tensor
    box_w: Tensor
    box_b: Tensor
    absent_motion: Tensor
    motion: AttentionParams
    attention: AttentionParams
    n_freq: int = DEFAULT_N_FREQ
    roi_size: int = DEFAULT_ROI_SIZE
    motion_fusion: str = 'concat'
    use_motion: bool = True

    def __post_init__(self):
        if self.motion_fusion not in MOTION_FUSIONS:
            raise ContractError(f"motion_fusion must be one of {MOTION_FUSIONS}, got {self.motion_fusion!r}")

    @property
    def dim(self):
        return self.w_in.shape[1]

    @classmethod
    def from_params(cls, params, prefix, n_heads=DEFAULT_N_HEADS, **options):
        return cls(
            w_in=params[f'{prefix}.w_in'],
            b_in=params[f'{prefix}.b_in'],
            absent_feature=params[f'{prefix}.absent_feature'],
            box_w=params[f'{prefix}.box_w'],
            box_b=params[f'{prefix}.box_b'],
            absent_motion=params[f'{prefix}.absent_motion'],
            motion=AttentionParams.from_params(params, f'{prefix}.motion', n_heads),
            attention=AttentionParams.from_params(params, f'{prefix}.attn', n_heads),
            **options,
        )


def init_enhancer(rng, channels, dim, prefix, n_freq=DEFAULT_N_FREQ):
    """Fresh enhancer parameters (feature projection, motion extractor, instance attention)"""
    box_in = 8 * n_freq
    params = {
        f'{prefix}.w_in': Tensor(rng.standard_normal((channels, dim)) / np.sqrt(channels), requires_grad=True),
        f'{prefix}.b_in': zeros((dim,), requires_grad=True),
        f'{prefix}.absent_feature': Tensor(rng.standard_normal(channels) * 0.1, requires_grad=True),
        f'{prefix}.box_w': Tensor(rng.standard_normal((box_in, dim)) / np.sqrt(box_in), requires_grad=True),
        f'{prefix}.box_b': zeros((dim,), requires_grad=True),
        f'{prefix}.absent_motion': Tensor(rng.standard_normal(dim) * 0.1, requires_grad=True),
    }
    params.update(init_attention(rng, dim, f'{prefix}.motion'))
    params.update(init_attention(rng, dim, f'{prefix}.attn'))
    return params


# --- FEATURE CUBES ---

def _presence(boxes):
    return np.array([b is not None for b in boxes], dtype=bool)


def extract_instance_cube(latent, tracklet, r=DEFAULT_ROI_SIZE, absent_feature=None):
    """
    F_i = concat_t roi_align(V_t, b_{i,t}, r).

    Args:
        latent: Tensor[T, H, W, C]
        tracklet: anything with a per-frame `boxes` list (Box or None)
        r: ROI grid size
        absent_feature: Tensor[C] written into absent frames

    Returns:
        InstanceFeatureCube
    """
    boxes = list(tracklet.boxes)
    if len(boxes) != latent.shape[0]:
        raise ContractError(f"tracklet has {len(boxes)} frames, latent has {latent.shape[0]}")
    values = roi_align_frames(latent, boxes, r, fill=absent_feature)
    return InstanceFeatureCube(values, _presence(boxes))


@dataclass
class _FullFrame:
    boxes: list


def extract_background_cube(latent, r=DEFAULT_ROI_SIZE):
    """Feature cube of the box covering the whole latent at every frame"""
    return extract_instance_cube(latent, _FullFrame([full_frame_box()] * latent.shape[0]), r)


# --- MOTION ---

def motion_extract(boxes, params, presence=None):
    """
    P_i = SelfAttn(box embeddings of one instance over time).

    Args:
        boxes: list of length T with a Box or None per frame
        params: EnhancerParams
        presence: Optional bool array overriding the None pattern of boxes

    Returns:
        MotionRep
    """
    boxes = list(boxes)
    presence = _presence(boxes) if presence is None else np.asarray(presence, dtype=bool)
    if len(boxes) < 1:
        raise ContractError("motion_extract needs at least one frame")
    if not presence.any():
        raise ContractError("motion_extract: every frame of the instance is absent")
    frames, dim = len(boxes), params.dim

    coords = np.array([b.as_tuple() for b, on in zip(boxes, presence) if on]).reshape(-1, 4)
    embedded = add(matmul(Tensor(fourier_embed_many(coords, params.n_freq)), params.box_w), params.box_b)

    index = np.full((frames, 1), embedded.shape[0], dtype=np.int64)
    index[presence, 0] = np.arange(embedded.shape[0])
    source = concat([embedded, reshape(params.absent_motion, (1, dim))], axis=0)
    tokens = gather_rows(source, index, np.ones(index.shape))
    return MotionRep(self_attention(tokens, params.motion, mask=presence), presence)


def zero_motion(frames, dim):
    """Background motion: zero tokens, always present"""
    return MotionRep(zeros((frames, dim)), np.ones(frames, dtype=bool))


# --- ENHANCEMENT ---

def instance_token_mask(cube, params):
    """Presence mask matching the token layout of enhance_instance"""
    cells = np.repeat(cube.presence, cube.roi_size ** 2)
    if params.use_motion and params.motion_fusion == 'concat':
        return np.concatenate([cells, cube.presence])
    return cells


def enhance_instance(cube, motion, params):
    """
    F'_i = SelfAttn(F_i (+) P_i).

    The cube is flattened to T*r*r tokens projected to dim. With concat fusion the
    T motion tokens are appended along the token axis; with add fusion each frame's
    motion token is added to that frame's r*r cells.

    Args:
        cube: InstanceFeatureCube
        motion: MotionRep, ignored when params.use_motion is off
        params: EnhancerParams

    Returns:
        Tensor[n_tokens, dim] with n_tokens = T*r*r (+ T for concat fusion)
    """
    frames, r, _, channels = cube.values.shape
    if channels != params.w_in.shape[0]:
        raise ContractError(f"cube has {channels} channels, projection expects {params.w_in.shape[0]}")
    cells = add(matmul(reshape(cube.values, (frames * r * r, channels)), params.w_in), params.b_in)
    dim = params.dim

    if params.use_motion:
        if motion is None or motion.values.shape != (frames, dim):
            got = None if motion is None else motion.values.shape
            raise ContractError(f"motion tokens {got} do not fit a {frames}-frame cube of width {dim}")
        if params.motion_fusion == 'concat':
            tokens = concat([cells, motion.values], axis=0)
        else:
            per_frame = add(reshape(cells, (frames, r * r, dim)), reshape(motion.values, (frames, 1, dim)))
            tokens = reshape(per_frame, (frames * r * r, dim))
    else:
        tokens = cells

    return self_attention(tokens, params.attention, mask=instance_token_mask(cube, params))


def enhance_all(latent, clip, params, slots=None, k_max=DEFAULT_K_MAX):
    """
    Enhanced token sets for every tracklet (slot order) plus the background.

    Args:
        latent: Tensor[T, H, W, C]
        clip: ClipAnnotation
        params: EnhancerParams
        slots: Optional instance_id -> slot mapping

    Returns:
        EnhancedTokens with len(clip.tracklets) + 1 sets
    """
    if len(clip.tracklets) > k_max:
        raise CapacityError(f"{len(clip.tracklets)} tracklets exceed k_max {k_max}")
    slots = assign_slots(clip) if slots is None else slots
    out = EnhancedTokens()
    for tracklet in sorted(clip.tracklets, key=lambda tr: slots[tr.instance_id]):
        cube = extract_instance_cube(latent, tracklet, params.roi_size, params.absent_feature)
        motion = motion_extract(tracklet.boxes, params) if params.use_motion else None
        out.sets.append(enhance_instance(cube, motion, params))
        out.masks.append(instance_token_mask(cube, params))

    background = extract_background_cube(latent, params.roi_size)
    motion = zero_motion(latent.shape[0], params.dim) if params.use_motion else None
    out.sets.append(enhance_instance(background, motion, params))
    out.masks.append(instance_token_mask(background, params))
    return out
