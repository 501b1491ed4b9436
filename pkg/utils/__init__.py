"""
Utilities package for the tracklet diffusion workbench
Contains tracklet data, evaluation, run configuration and visualization functions
"""

from .trackdata import (
    Tracklet,
    ClipAnnotation,
    FrameBuffer,
    parse_annotations,
    serialize_annotations,
    read_annotation,
    write_annotation,
    gen_synthetic,
    gen_dataset,
    encode_frames,
    decode_latent,
    write_frames,
    read_frames,
    write_dataset,
    load_dataset
)

from .evalkit import (
    GroundingReport,
    detect_blobs,
    grounding_miou,
    aggregate_reports,
    fvd_stub,
    temporal_consistency_probe,
    get_metric_status,
    THRESHOLDS
)

from .run_config import (
    RunConfig,
    load_defaults,
    resolve_config,
    write_resolved,
    denoiser_config,
    optimizer_config
)

from .visualizations import (
    create_loss_curve,
    create_iou_heatmap,
    create_similarity_heatmap,
    create_ablation_bar,
    create_frame_strip,
    COLORS
)

__all__ = [
    'Tracklet',
    'ClipAnnotation',
    'FrameBuffer',
    'parse_annotations',
    'serialize_annotations',
    'read_annotation',
    'write_annotation',
    'gen_synthetic',
    'gen_dataset',
    'encode_frames',
    'decode_latent',
    'write_frames',
    'read_frames',
    'write_dataset',
    'load_dataset',
    'GroundingReport',
    'detect_blobs',
    'grounding_miou',
    'aggregate_reports',
    'fvd_stub',
    'temporal_consistency_probe',
    'get_metric_status',
    'THRESHOLDS',
    'RunConfig',
    'load_defaults',
    'resolve_config',
    'write_resolved',
    'denoiser_config',
    'optimizer_config',
    'create_loss_curve',
    'create_iou_heatmap',
    'create_similarity_heatmap',
    'create_ablation_bar',
    'create_frame_strip',
    'COLORS'
]
