"""
Tracklet Data Module
Annotation documents, the synthetic moving-rectangles world,
the patchify frame/latent codec and PPM frame sequences
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from core.errors import AnnotationError, CapacityError, ConfigError, ContractError
from core.geometry import Box, box_from_pixels
from core.tensor_core import Tensor, make_rng

logger = logging.getLogger(__name__)

DEFAULT_K_MAX = 8
DEFAULT_PATCH = 4
BACKGROUND = 0.5

# Codec gain: a power of two and no offset, so the round trip is exact
LATENT_GAIN = 4.0

# One color per category; every channel is a multiple of 1/8
PALETTE = np.array([
    [1.0, 0.0, 0.0],    # red
    [0.0, 1.0, 0.0],    # green
    [0.0, 0.0, 1.0],    # blue
    [1.0, 1.0, 0.0],    # yellow
    [1.0, 0.0, 1.0],    # magenta
    [0.0, 1.0, 1.0],    # cyan
    [1.0, 0.5, 0.0],    # orange
    [0.5, 0.0, 1.0],    # violet
])

COORD_DECIMALS = 6


# ============================================================================
# DATA MODEL
# ============================================================================

@dataclass(frozen=True)
class Tracklet:
    """One instance across a clip: a Box or None (absent) per frame"""
    instance_id: int
    category_id: int
    boxes: Tuple[Optional[Box], ...]

    @property
    def present(self):
        return np.array([b is not None for b in self.boxes], dtype=bool)

    @property
    def frames(self):
        return len(self.boxes)


@dataclass(frozen=True)
class ClipAnnotation:
    frames: int
    width: int
    height: int
    tracklets: Tuple[Tracklet, ...] = ()
    caption: Optional[str] = None
    fps: Optional[float] = None

    @property
    def instance_ids(self):
        return [tr.instance_id for tr in self.tracklets]

    def frame_slice(self, t):
        """Single-frame clip holding the tracklets present at frame t"""
        if not 0 <= t < self.frames:
            raise ContractError(f"frame {t} outside [0, {self.frames})")
        kept = tuple(
            Tracklet(tr.instance_id, tr.category_id, (tr.boxes[t],))
            for tr in self.tracklets if tr.boxes[t] is not None
        )
        return ClipAnnotation(1, self.width, self.height, kept, self.caption, self.fps)

    def without_tracklets(self):
        return ClipAnnotation(self.frames, self.width, self.height, (), self.caption, self.fps)


@dataclass
class FrameBuffer:
    """Pixels [T, height, width, 3] in [0, 1]"""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise ContractError(f"frame buffer must be [T, H, W, 3], got {self.pixels.shape}")

    @property
    def frames(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]


# ============================================================================
# ANNOTATION DOCUMENTS
# ============================================================================

def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value):
    return (isinstance(value, (int, float)) and not isinstance(value, bool)
            and np.isfinite(value))


def _positive_int(doc, key):
    if key not in doc:
        raise AnnotationError('missing_key', f"missing top-level key {key!r}")
    value = doc[key]
    if not _is_int(value):
        raise AnnotationError('bad_type', f"{key!r} must be an integer, got {value!r}")
    if value < 1:
        raise AnnotationError('out_of_range', f"{key!r} must be >= 1, got {value}")
    return value


def _parse_box(entry, where, width, height):
    if entry is None:
        return None
    if not isinstance(entry, list) or len(entry) != 4 or not all(_is_number(v) for v in entry):
        raise AnnotationError('bad_type', f"{where}: a box is null or [x1, y1, x2, y2], got {entry!r}")
    x1, y1, x2, y2 = (round(float(v), COORD_DECIMALS) for v in entry)
    if x2 < x1 or y2 < y1:
        raise AnnotationError('box_order', f"{where}: box {entry} has x2 < x1 or y2 < y1")
    if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
        raise AnnotationError('out_of_range', f"{where}: box {entry} leaves the {width}x{height} frame")
    return box_from_pixels(x1, y1, x2, y2, width, height)


def parse_annotations(data, k_max=DEFAULT_K_MAX):
    """
    Parse and validate an annotation document.

    Args:
        data: UTF-8 bytes or str of the JSON document
        k_max: Largest accepted number of tracklets

    Returns:
        ClipAnnotation with boxes normalized by the frame extent

    Raises:
        AnnotationError: with code 'syntax' (carrying line/column) or a semantic code
    """
    try:
        text = data.decode('utf-8') if isinstance(data, (bytes, bytearray)) else data
        doc = json.loads(text)
    except UnicodeDecodeError as exc:
        raise AnnotationError('syntax', f"not UTF-8: {exc}") from None
    except json.JSONDecodeError as exc:
        raise AnnotationError('syntax', exc.msg, exc.lineno, exc.colno) from None

    if not isinstance(doc, dict):
        raise AnnotationError('bad_type', "the document must be a JSON object")
    width = _positive_int(doc, 'width')
    height = _positive_int(doc, 'height')
    frames = _positive_int(doc, 'frames')
    fps = doc.get('fps')
    if fps is not None and (not _is_number(fps) or fps <= 0):
        raise AnnotationError('bad_type', f"'fps' must be a positive number, got {fps!r}")
    caption = doc.get('caption')
    if caption is not None and not isinstance(caption, str):
        raise AnnotationError('bad_type', f"'caption' must be a string, got {caption!r}")
    if 'tracklets' not in doc:
        raise AnnotationError('missing_key', "missing top-level key 'tracklets'")
    raw = doc['tracklets']
    if not isinstance(raw, list):
        raise AnnotationError('bad_type', "'tracklets' must be an array")
    if len(raw) > k_max:
        raise AnnotationError('capacity', f"{len(raw)} tracklets exceed k_max {k_max}")

    tracklets, seen = [], set()
    for n, item in enumerate(raw):
        where = f"tracklets[{n}]"
        if not isinstance(item, dict):
            raise AnnotationError('bad_type', f"{where} must be an object")
        for key in ('id', 'category', 'boxes'):
            if key not in item:
                raise AnnotationError('missing_key', f"{where} is missing {key!r}")
        if not _is_int(item['id']) or not _is_int(item['category']):
            raise AnnotationError('bad_type', f"{where}: 'id' and 'category' must be integers")
        if item['category'] < 0:
            raise AnnotationError('out_of_range', f"{where}: negative category {item['category']}")
        if item['id'] in seen:
            raise AnnotationError('duplicate_id', f"{where}: instance id {item['id']} appears twice")
        seen.add(item['id'])
        boxes = item['boxes']
        if not isinstance(boxes, list):
            raise AnnotationError('bad_type', f"{where}: 'boxes' must be an array")
        if len(boxes) != frames:
            raise AnnotationError('ragged_frames', f"{where} has {len(boxes)} boxes for {frames} frames")
        parsed = tuple(_parse_box(b, f"{where}.boxes[{t}]", width, height) for t, b in enumerate(boxes))
        if all(b is None for b in parsed):
            raise AnnotationError('empty_tracklet', f"{where} is absent in every frame")
        tracklets.append(Tracklet(item['id'], item['category'], parsed))

    return ClipAnnotation(frames, width, height, tuple(tracklets), caption, fps)


def _fixed(value):
    return f"{value:.{COORD_DECIMALS}f}"


def serialize_annotations(clip):
    """
    Annotation document with keys in grammar order and 6-decimal pixel coordinates.

    Returns:
        str
    """
    lines = ['{']
    if clip.fps is not None:
        lines.append(f'  "fps": {json.dumps(clip.fps)},')
    lines.append(f'  "width": {clip.width},')
    lines.append(f'  "height": {clip.height},')
    lines.append(f'  "frames": {clip.frames},')
    rows = []
    for tr in clip.tracklets:
        boxes = []
        for b in tr.boxes:
            if b is None:
                boxes.append('null')
                continue
            pixels = (b.x1 * clip.width, b.y1 * clip.height, b.x2 * clip.width, b.y2 * clip.height)
            boxes.append('[' + ', '.join(_fixed(v) for v in pixels) + ']')
        rows.append(f'    {{"id": {tr.instance_id}, "category": {tr.category_id}, '
                    f'"boxes": [{", ".join(boxes)}]}}')
    tail = ',' if clip.caption is not None else ''
    if rows:
        lines.append('  "tracklets": [')
        lines.append(',\n'.join(rows))
        lines.append(f'  ]{tail}')
    else:
        lines.append(f'  "tracklets": []{tail}')
    if clip.caption is not None:
        lines.append(f'  "caption": {json.dumps(clip.caption)}')
    lines.append('}')
    return '\n'.join(lines) + '\n'


def read_annotation(path, k_max=DEFAULT_K_MAX):
    return parse_annotations(Path(path).read_bytes(), k_max)


def write_annotation(clip, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_annotations(clip), encoding='utf-8')
    return path


# ============================================================================
# SYNTHETIC WORLD
# ============================================================================

@dataclass
class _Track:
    left: np.ndarray
    top: np.ndarray
    widths: np.ndarray
    heights: np.ndarray
    present: np.ndarray


def _size_range(width, height):
    side = min(width, height)
    return max(2, int(round(side * 0.1875))), max(3, int(round(side * 0.375)))


def _bounce(pos, vel, limit):
    # reflect at both walls until inside [0, limit]
    while pos < 0 or pos > limit:
        if pos < 0:
            pos, vel = -pos, -vel
        if pos > limit:
            pos, vel = 2 * limit - pos, -vel
        if limit == 0:
            return 0.0, 0.0
    return pos, vel


def _draw_track(rng, frames, width, height, disappear_prob, scale_prob):
    lo, hi = _size_range(width, height)
    w0, h0 = rng.integers(lo, hi + 1, size=2)
    if rng.random() < scale_prob:
        w1, h1 = rng.integers(lo, hi + 1, size=2)
    else:
        w1, h1 = w0, h0
    ramp = np.linspace(0.0, 1.0, frames)
    widths = np.round(w0 + (w1 - w0) * ramp).astype(int)
    heights = np.round(h0 + (h1 - h0) * ramp).astype(int)

    x = float(rng.uniform(0, width - widths[0]))
    y = float(rng.uniform(0, height - heights[0]))
    vx, vy = rng.uniform(-2.0, 2.0, size=2)
    left, top = np.zeros(frames, dtype=int), np.zeros(frames, dtype=int)
    for t in range(frames):
        x, vx = _bounce(x, vx, width - widths[t])
        y, vy = _bounce(y, vy, height - heights[t])
        left[t] = int(np.clip(round(x), 0, width - widths[t]))
        top[t] = int(np.clip(round(y), 0, height - heights[t]))
        x, y = x + vx, y + vy

    present = np.ones(frames, dtype=bool)
    if frames >= 3 and rng.random() < disappear_prob:
        length = int(rng.integers(1, max(1, frames // 3) + 1))
        start = int(rng.integers(1, frames - length + 1))
        present[start:start + length] = False
    return _Track(left, top, widths, heights, present)


def _overlaps(a, b):
    for t in np.flatnonzero(a.present & b.present):
        if (a.left[t] < b.left[t] + b.widths[t] and b.left[t] < a.left[t] + a.widths[t]
                and a.top[t] < b.top[t] + b.heights[t] and b.top[t] < a.top[t] + a.heights[t]):
            return True
    return False


def gen_synthetic(seed, n_instances, frames, width, height, k_max=DEFAULT_K_MAX,
                  disappear_prob=0.3, scale_prob=0.3, caption=None, max_tries=50):
    """
    Render solid rectangles moving over a gray background.

    Every instance gets its own category and palette color, a constant velocity with
    reflection at the frame border, an optional monotone size ramp and an optional
    disappearance window. Trajectories are redrawn (up to max_tries) until they do not
    overlap earlier instances, so annotation boxes bound the visible rectangles. An
    instance with no free trajectory after max_tries is left out, so crowded frames
    can hold fewer than n_instances tracklets.

    Args:
        seed: int or numpy SeedSequence
        n_instances: Requested number of rectangles (<= k_max and <= palette size)

    Returns:
        tuple: (ClipAnnotation, FrameBuffer)

    Raises:
        CapacityError: n_instances exceeds k_max or the palette
    """
    if n_instances > k_max or n_instances > len(PALETTE):
        raise CapacityError(
            f"{n_instances} instances exceed k_max {k_max} / palette size {len(PALETTE)}"
        )
    if n_instances < 0 or frames < 1 or width < 4 or height < 4:
        raise ConfigError(f"invalid clip geometry n={n_instances} T={frames} {width}x{height}")
    rng = make_rng(seed)
    categories = rng.choice(len(PALETTE), size=n_instances, replace=False)

    tracks = []
    for _ in range(n_instances):
        for _ in range(max_tries):
            track = _draw_track(rng, frames, width, height, disappear_prob, scale_prob)
            if not any(_overlaps(track, other) for other in tracks):
                tracks.append(track)
                break
        else:
            logger.debug("no free trajectory after %d tries, dropping instance %d", max_tries, len(tracks))

    pixels = np.full((frames, height, width, 3), BACKGROUND)
    tracklets = []
    for i, (track, category) in enumerate(zip(tracks, categories)):
        boxes = []
        for t in range(frames):
            if not track.present[t]:
                boxes.append(None)
                continue
            x1, y1 = track.left[t], track.top[t]
            x2, y2 = x1 + track.widths[t], y1 + track.heights[t]
            pixels[t, y1:y2, x1:x2] = PALETTE[category]
            boxes.append(box_from_pixels(x1, y1, x2, y2, width, height))
        tracklets.append(Tracklet(i, int(category), tuple(boxes)))

    clip = ClipAnnotation(frames, width, height, tuple(tracklets), caption)
    return clip, FrameBuffer(pixels)


def gen_dataset(seed, n_clips, max_instances, frames, width, height, vary_instances=True, **kwargs):
    """
    Independent synthetic clips, one spawned seed stream per clip.

    Returns:
        list of (ClipAnnotation, FrameBuffer)
    """
    k_max = kwargs.get('k_max', DEFAULT_K_MAX)
    if max_instances > min(k_max, len(PALETTE)):
        raise CapacityError(
            f"{max_instances} instances exceed k_max {k_max} / palette size {len(PALETTE)}"
        )
    if n_clips < 0:
        raise ConfigError(f"clip count must be >= 0, got {n_clips}")
    children = np.random.SeedSequence(seed).spawn(n_clips)
    out = []
    for child in children:
        count = max_instances
        if vary_instances and max_instances > 0:
            count = int(make_rng(child.spawn(1)[0]).integers(1, max_instances + 1))
        out.append(gen_synthetic(child, count, frames, width, height, **kwargs))
    return out


# ============================================================================
# PATCHIFY CODEC
# ============================================================================

def encode_frames(frames, patch=DEFAULT_PATCH):
    """
    Space-to-depth rearrangement followed by pixel * 4.

    Args:
        frames: FrameBuffer or array [T, H, W, 3]
        patch: Patch edge p (H and W must be divisible by p)

    Returns:
        np.ndarray [T, H/p, W/p, 3 p^2]
    """
    pixels = frames.pixels if isinstance(frames, FrameBuffer) else np.asarray(frames, dtype=np.float64)
    count, height, width, _ = pixels.shape
    if patch < 1 or height % patch or width % patch:
        raise ConfigError(f"frame size {width}x{height} is not divisible by patch {patch}")
    blocks = pixels.reshape(count, height // patch, patch, width // patch, patch, 3)
    blocks = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(count, height // patch, width // patch, 3 * patch * patch)
    return blocks * LATENT_GAIN


def decode_latent(latent, patch=DEFAULT_PATCH, clamp=False):
    """
    Exact inverse of encode_frames.

    Args:
        latent: array [T, h, w, 3 p^2]
        clamp: Clip to [0, 1] (for display output)

    Returns:
        FrameBuffer
    """
    latent = latent.data if isinstance(latent, Tensor) else latent
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 4 or latent.shape[-1] != 3 * patch * patch:
        raise ContractError(f"latent {latent.shape} does not factor into 3 x {patch} x {patch} patches")
    count, rows, cols, _ = latent.shape
    blocks = latent / LATENT_GAIN
    pixels = blocks.reshape(count, rows, cols, patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    pixels = pixels.reshape(count, rows * patch, cols * patch, 3)
    if clamp:
        pixels = np.clip(pixels, 0.0, 1.0)
    return FrameBuffer(pixels)


# ============================================================================
# FRAME FILES
# ============================================================================

INDEX_NAME = 'index.txt'


def write_frames(frames, out_dir, prefix='frame'):
    """
    Write P6 PPM images plus an index listing them in order.

    Returns:
        Path of the index file
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = frames.pixels if isinstance(frames, FrameBuffer) else np.asarray(frames)
    names = []
    for t, frame in enumerate(pixels):
        name = f'{prefix}_{t:03d}.ppm'
        as_bytes = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(as_bytes).save(out_dir / name, format='PPM')
        names.append(name)
    index = out_dir / INDEX_NAME
    index.write_text('\n'.join(names) + '\n', encoding='utf-8')
    logger.debug("wrote %d frames to %s", len(names), out_dir)
    return index


def read_frames(index_path):
    """Load a frame sequence written by write_frames (paths relative to the index)"""
    index_path = Path(index_path)
    if not index_path.exists():
        raise ContractError(f"frame index not found: {index_path}")
    names = [line.strip() for line in index_path.read_text(encoding='utf-8').splitlines() if line.strip()]
    if not names:
        raise ContractError(f"frame index {index_path} lists no frames")
    frames = []
    for name in names:
        with Image.open(index_path.parent / name) as img:
            frames.append(np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0)
    return FrameBuffer(np.stack(frames))


# --- dataset trees ---

def write_dataset(pairs, out_dir):
    """
    Lay out clips as clip_NNN/annotation.json + clip_NNN/frames/index.txt

    Returns:
        list of clip directories
    """
    out_dir = Path(out_dir)
    dirs = []
    for n, (clip, frames) in enumerate(pairs):
        clip_dir = out_dir / f'clip_{n:03d}'
        write_annotation(clip, clip_dir / 'annotation.json')
        write_frames(frames, clip_dir / 'frames')
        dirs.append(clip_dir)
    logger.info("wrote %d clips to %s", len(dirs), out_dir)
    return dirs


def load_dataset(root, patch=DEFAULT_PATCH, k_max=DEFAULT_K_MAX):
    """
    Read every clip directory under root.

    Returns:
        list of (ClipAnnotation, latent np.ndarray) in directory order
    """
    root = Path(root)
    clip_dirs = sorted(p for p in root.glob('clip_*') if p.is_dir())
    if not clip_dirs:
        raise ConfigError(f"no clip_* directories under {root}")
    pairs = []
    for clip_dir in clip_dirs:
        clip = read_annotation(clip_dir / 'annotation.json', k_max)
        frames = read_frames(clip_dir / 'frames' / INDEX_NAME)
        if (frames.frames, frames.height, frames.width) != (clip.frames, clip.height, clip.width):
            raise ContractError(f"{clip_dir}: frames do not match the annotation extents")
        pairs.append((clip, encode_frames(frames, patch)))
    return pairs
