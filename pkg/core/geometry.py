"""
Geometry Module
Normalized boxes, Fourier box embedding and ROIAlign
"""

from dataclasses import dataclass

import numpy as np

from core.errors import ContractError
from core.tensor_core import Tensor, concat, gather_rows, reshape

DEFAULT_N_FREQ = 8
DEFAULT_ROI_SIZE = 4


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in frame-relative coordinates, 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1"""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ContractError(f"invalid box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1


def area(b):
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def full_frame_box():
    """The box covering the whole latent, used for the background cube"""
    return Box(0.0, 0.0, 1.0, 1.0)


def iou(a, b):
    """Intersection over union; 0 when the union is empty"""
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


# --- FOURIER EMBEDDING ---

def fourier_embed(b, n_freq=DEFAULT_N_FREQ):
    """
    Fourier features of the four box coordinates.

    For each coordinate u (x1, y1, x2, y2) and k in 0..n_freq-1 emits
    [sin(2^k * pi * u), cos(2^k * pi * u)].

    Returns:
        np.ndarray of length 8 * n_freq
    """
    return fourier_embed_many(np.array([b.as_tuple()]), n_freq)[0]


def fourier_embed_many(coords, n_freq=DEFAULT_N_FREQ):
    """Vectorized fourier_embed over an array of boxes shaped [P, 4]"""
    if n_freq < 1:
        raise ContractError(f"n_freq must be >= 1, got {n_freq}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 4)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    angles = coords[:, :, None] * freqs[None, None, :]
    # coordinate-major, frequency-minor, (sin, cos) innermost
    pairs = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    return pairs.reshape(coords.shape[0], 8 * n_freq)


# --- ROI ALIGN ---

def roi_sample_points(b, r, height, width):
    """
    Bin-center sampling positions of an r x r grid inside a box, in pixel-center space.

    A normalized coordinate u maps to u * W - 0.5, so the centers of a full-frame
    r = W grid land exactly on pixel centers.

    Returns:
        (ys, xs): arrays of shape [r, r]
    """
    if r < 1:
        raise ContractError(f"roi grid size must be >= 1, got {r}")
    centers = np.arange(r) + 0.5
    # pixel-space arithmetic keeps full-frame grids with r == W exactly on pixel centers
    xs = b.x1 * width + centers * ((b.x2 - b.x1) * width / r) - 0.5
    ys = b.y1 * height + centers * ((b.y2 - b.y1) * height / r) - 0.5
    return np.meshgrid(ys, xs, indexing='ij')


def bilinear_corners(ys, xs, height, width):
    """
    Corner indices and weights for clamp-to-edge bilinear interpolation.

    Returns:
        (index, weights): int array [P, 4] into a row-major H x W grid, float array [P, 4]
    """
    ys = np.clip(np.asarray(ys, dtype=np.float64).reshape(-1), 0.0, height - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64).reshape(-1), 0.0, width - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    wy = ys - y0
    wx = xs - x0
    index = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    weights = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx], axis=1)
    return index, weights


def roi_align(feat, b, r=DEFAULT_ROI_SIZE):
    """
    Sample an r x r grid of bilinear bin centers inside a box.

    Args:
        feat: Tensor[H, W, C]
        b: Box
        r: Output grid size (one sample per bin)

    Returns:
        Tensor[r, r, C], differentiable with respect to feat
    """
    if feat.ndim != 3:
        raise ContractError(f"roi_align expects [H, W, C], got {feat.shape}")
    height, width, channels = feat.shape
    ys, xs = roi_sample_points(b, r, height, width)
    index, weights = bilinear_corners(ys, xs, height, width)
    flat = reshape(feat, (height * width, channels))
    return reshape(gather_rows(flat, index, weights), (r, r, channels))


def roi_align_frames(latent, boxes, r=DEFAULT_ROI_SIZE, fill=None):
    """
    ROIAlign every frame of a clip in one gather.

    Args:
        latent: Tensor[T, H, W, C]
        boxes: list of length T with a Box or None (absent) per frame
        r: Output grid size
        fill: Tensor[C] written to every cell of absent frames (required if any frame is absent)

    Returns:
        Tensor[T, r, r, C]
    """
    frames, height, width, channels = latent.shape
    if len(boxes) != frames:
        raise ContractError(f"{len(boxes)} boxes for a {frames}-frame latent")
    flat = reshape(latent, (frames * height * width, channels))
    fill_row = frames * height * width
    indices, weights = [], []
    for t, b in enumerate(boxes):
        if b is None:
            if fill is None:
                raise ContractError(f"frame {t} is absent but no fill feature was given")
            indices.append(np.full((r * r, 4), fill_row, dtype=np.int64))
            weights.append(np.tile([1.0, 0.0, 0.0, 0.0], (r * r, 1)))
            continue
        ys, xs = roi_sample_points(b, r, height, width)
        index, w = bilinear_corners(ys, xs, height, width)
        indices.append(index + t * height * width)
        weights.append(w)
    source = flat if fill is None else concat([flat, reshape(fill, (1, channels))], axis=0)
    out = gather_rows(source, np.concatenate(indices), np.concatenate(weights))
    return reshape(out, (frames, r, r, channels))


def box_from_pixels(x1, y1, x2, y2, width, height):
    """Normalize a pixel-space box by the frame extent"""
    return Box(x1 / width, y1 / height, x2 / width, y2 / height)


def to_tensor_boxes(boxes):
    """Stack boxes into a constant Tensor[P, 4]"""
    return Tensor(np.array([b.as_tuple() for b in boxes]).reshape(-1, 4))
