"""
Conditioning Module
Instance-aware location tokens: category embedding + Fourier box features through an MLP,
plus a learnable per-instance token
"""

from dataclasses import dataclass

import numpy as np

from core.errors import CapacityError, CategoryIndexError, ContractError
from core.geometry import DEFAULT_N_FREQ, fourier_embed_many
from core.tensor_core import (
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    reshape,
    silu,
    zeros,
)

DEFAULT_DIM = 64
DEFAULT_K_MAX = 8
DEFAULT_N_CATEGORIES = 8


@dataclass
class CategoryTable:
    """Learned lookup table standing in for a text-encoder category embedding"""
    weights: Tensor

    @property
    def n_categories(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]


@dataclass
class InstanceTokenTable:
    """One learnable identity token e_i per instance slot"""
    weights: Tensor

    @property
    def k_max(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]


@dataclass
class LocationMLP:
    """linear -> SiLU -> linear, input width dim + 8 * n_freq"""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LocationToken:
    values: Tensor
    instance_slot: int
    frame: int
    present: bool


@dataclass
class ConditioningParams:
    categories: CategoryTable
    instances: InstanceTokenTable
    mlp: LocationMLP
    absent: Tensor
    n_freq: int = DEFAULT_N_FREQ

    @classmethod
    def from_params(cls, params, prefix='cond', n_freq=DEFAULT_N_FREQ):
        return cls(
            categories=CategoryTable(params[f'{prefix}.category']),
            instances=InstanceTokenTable(params[f'{prefix}.instance']),
            mlp=LocationMLP(
                w1=params[f'{prefix}.mlp.w1'],
                b1=params[f'{prefix}.mlp.b1'],
                w2=params[f'{prefix}.mlp.w2'],
                b2=params[f'{prefix}.mlp.b2'],
            ),
            absent=params[f'{prefix}.absent'],
            n_freq=n_freq,
        )


@dataclass
class LocationGrid:
    """
    Location tokens of a clip indexed [instance slot, frame]

    Attributes:
        values: Tensor[n, T, dim]
        present: bool array [n, T]
        slots: instance_id per row, in slot order
    """
    values: Tensor
    present: np.ndarray
    slots: list

    @property
    def n_instances(self):
        return len(self.slots)

    def __len__(self):
        return int(self.present.size)

    def tokens(self):
        """Flat list of LocationToken, instance-major"""
        out = []
        n, frames = self.present.shape
        for i in range(n):
            for t in range(frames):
                out.append(LocationToken(
                    values=Tensor(self.values.data[i, t]),
                    instance_slot=i,
                    frame=t,
                    present=bool(self.present[i, t]),
                ))
        return out


def init_conditioning(rng, dim=DEFAULT_DIM, n_categories=DEFAULT_N_CATEGORIES, k_max=DEFAULT_K_MAX,
                      n_freq=DEFAULT_N_FREQ, prefix='cond'):
    """Fresh conditioning parameters as a flat dict"""
    fan_in = dim + 8 * n_freq

    def param(shape, std):
        return Tensor(rng.standard_normal(shape) * std, requires_grad=True)

    return {
        f'{prefix}.category': param((n_categories, dim), 1.0),
        f'{prefix}.instance': param((k_max, dim), 0.1),
        f'{prefix}.mlp.w1': param((fan_in, dim), 1.0 / np.sqrt(fan_in)),
        f'{prefix}.mlp.b1': zeros((dim,), requires_grad=True),
        f'{prefix}.mlp.w2': param((dim, dim), 1.0 / np.sqrt(dim)),
        f'{prefix}.mlp.b2': zeros((dim,), requires_grad=True),
        f'{prefix}.absent': param((dim,), 0.1),
    }


# ============================================================================
# TOKENS
# ============================================================================

def _lookup(table, rows):
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 1)
    return gather_rows(table, rows, np.ones(rows.shape))


def location_tokens(coords, categories, tables, mlp, n_freq=DEFAULT_N_FREQ):
    """
    Batched H = MLP([category_embedding, fourier(b)]).

    Args:
        coords: array [P, 4] of normalized boxes
        categories: int array [P]
        tables: CategoryTable
        mlp: LocationMLP

    Returns:
        Tensor[P, dim]
    """
    categories = np.asarray(categories, dtype=np.int64).reshape(-1)
    bad = (categories < 0) | (categories >= tables.n_categories)
    if bad.any():
        raise CategoryIndexError(
            f"category {int(categories[bad][0])} outside [0, {tables.n_categories})"
        )
    features = Tensor(fourier_embed_many(coords, n_freq))
    joined = concat([_lookup(tables.weights, categories), features], axis=-1)
    hidden = silu(add(matmul(joined, mlp.w1), mlp.b1))
    return add(matmul(hidden, mlp.w2), mlp.b2)


def location_token(b, cat, tables, mlp, n_freq=DEFAULT_N_FREQ):
    """Location token H of one box, Tensor[dim]"""
    out = location_tokens(np.array([b.as_tuple()]), [cat], tables, mlp, n_freq)
    return reshape(out, (out.shape[-1],))


def add_instance_token(h, slot, table):
    """H' = H + e_slot"""
    if not 0 <= slot < table.k_max:
        raise CapacityError(f"instance slot {slot} exceeds k_max {table.k_max}")
    e = reshape(_lookup(table.weights, [slot]), (table.dim,))
    return add(h, e)


def assign_slots(clip):
    """instance_id -> slot, by order of first appearance (ties keep input order)"""
    firsts = []
    for order, tracklet in enumerate(clip.tracklets):
        first = next((t for t, b in enumerate(tracklet.boxes) if b is not None), len(tracklet.boxes))
        firsts.append((first, order, tracklet.instance_id))
    return {instance_id: slot for slot, (_, _, instance_id) in enumerate(sorted(firsts))}


def clip_location_tokens(clip, params, slots=None, use_instance_embedding=True):
    """
    Location tokens for every (instance, frame) of a clip.

    Args:
        clip: ClipAnnotation
        params: ConditioningParams
        slots: Optional instance_id -> slot mapping (default: assign_slots)
        use_instance_embedding: Add e_i; off reproduces the plain box-token baseline

    Returns:
        LocationGrid with rows in slot order; absent frames hold the learned absent token
    """
    k_max = params.instances.k_max
    if len(clip.tracklets) > k_max:
        raise CapacityError(f"{len(clip.tracklets)} tracklets exceed k_max {k_max}")
    slots = assign_slots(clip) if slots is None else slots
    by_slot = sorted(clip.tracklets, key=lambda tr: slots[tr.instance_id])
    n, frames, dim = len(by_slot), clip.frames, params.absent.shape[0]
    present = np.zeros((n, frames), dtype=bool)
    if n == 0:
        return LocationGrid(zeros((0, frames, dim)), present, [])

    coords, cats, rows = [], [], []
    for i, tracklet in enumerate(by_slot):
        slot = slots[tracklet.instance_id]
        if not 0 <= slot < k_max:
            raise CapacityError(f"instance slot {slot} exceeds k_max {k_max}")
        if len(tracklet.boxes) != frames:
            raise ContractError(
                f"tracklet {tracklet.instance_id} has {len(tracklet.boxes)} frames, clip has {frames}"
            )
        for t, b in enumerate(tracklet.boxes):
            if b is not None:
                present[i, t] = True
                coords.append(b.as_tuple())
                cats.append(tracklet.category_id)
                rows.append(slot)

    h = location_tokens(np.array(coords), cats, params.categories, params.mlp, params.n_freq)
    if use_instance_embedding:
        h = add(h, _lookup(params.instances.weights, rows))

    # grid rows point into [h; absent]
    absent_row = h.shape[0]
    index = np.full((n * frames, 1), absent_row, dtype=np.int64)
    index[present.reshape(-1), 0] = np.arange(absent_row)
    source = concat([h, reshape(params.absent, (1, dim))], axis=0)
    grid = gather_rows(source, index, np.ones(index.shape))
    return LocationGrid(reshape(grid, (n, frames, dim)), present, [tr.instance_id for tr in by_slot])


def instance_similarity(table):
    """
    Cosine similarity matrix of the learned instance tokens.

    Args:
        table: InstanceTokenTable or Tensor[k_max, dim]

    Returns:
        np.ndarray [k_max, k_max]
    """
    weights = table.weights.data if isinstance(table, InstanceTokenTable) else table.data
    norms = np.linalg.norm(weights, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = weights / safe[:, None]
    return unit @ unit.T
