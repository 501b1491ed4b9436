"""
Core package for the tracklet-conditioned video diffusion workbench
Contains the autodiff tensor, geometry, attention, conditioning, enhancer, diffusion and denoiser
"""

from .errors import (
    TrackDiffError,
    ShapeError,
    ContractError,
    CapacityError,
    ConfigError,
    CategoryIndexError,
    StepIndexError,
    NumericError,
    AnnotationError
)

from .tensor_core import (
    Tensor,
    no_grad,
    grad_check,
    grad_check_params,
    make_rng,
    spawn_rngs,
    save_checkpoint,
    load_checkpoint
)

from .geometry import (
    Box,
    iou,
    area,
    full_frame_box,
    fourier_embed,
    roi_align
)

from .conditioning import (
    CategoryTable,
    InstanceTokenTable,
    LocationToken,
    location_token,
    add_instance_token,
    clip_location_tokens,
    instance_similarity
)

from .attention import (
    AttentionParams,
    GateParam,
    self_attention,
    cross_attention,
    gated_self_attention,
    gated_cross_attention,
    temporal_attention
)

from .instance_enhancer import (
    InstanceFeatureCube,
    MotionRep,
    extract_instance_cube,
    extract_background_cube,
    motion_extract,
    enhance_instance,
    enhance_all
)

from .diffusion import (
    NoiseSchedule,
    make_schedule,
    respace,
    q_sample,
    training_loss,
    ddpm_step,
    cfg_combine
)

from .denoiser import (
    DenoiserConfig,
    OptimizerConfig,
    Denoiser,
    init_params,
    denoiser_forward,
    train_stage,
    sample_clip,
    save_model,
    load_model
)

__all__ = [
    'TrackDiffError',
    'ShapeError',
    'ContractError',
    'CapacityError',
    'ConfigError',
    'CategoryIndexError',
    'StepIndexError',
    'NumericError',
    'AnnotationError',
    'Tensor',
    'no_grad',
    'grad_check',
    'grad_check_params',
    'make_rng',
    'spawn_rngs',
    'save_checkpoint',
    'load_checkpoint',
    'Box',
    'iou',
    'area',
    'full_frame_box',
    'fourier_embed',
    'roi_align',
    'CategoryTable',
    'InstanceTokenTable',
    'LocationToken',
    'location_token',
    'add_instance_token',
    'clip_location_tokens',
    'instance_similarity',
    'AttentionParams',
    'GateParam',
    'self_attention',
    'cross_attention',
    'gated_self_attention',
    'gated_cross_attention',
    'temporal_attention',
    'InstanceFeatureCube',
    'MotionRep',
    'extract_instance_cube',
    'extract_background_cube',
    'motion_extract',
    'enhance_instance',
    'enhance_all',
    'NoiseSchedule',
    'make_schedule',
    'respace',
    'q_sample',
    'training_loss',
    'ddpm_step',
    'cfg_combine',
    'DenoiserConfig',
    'OptimizerConfig',
    'Denoiser',
    'init_params',
    'denoiser_forward',
    'train_stage',
    'sample_clip',
    'save_model',
    'load_model'
]
