"""
Tensor Core Module
Dense float64 tensor with tape-based reverse-mode autodiff,
plus the seeded RNG, gradient checker and checkpoint format used everywhere else
"""

import json
import logging
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

from core.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

# Additive logit for masked keys; exp() of it underflows to exactly 0 after max-subtraction
MASK_FILL = -1e9

_GRAD_STATE = {'enabled': True}


@contextmanager
def no_grad():
    """Record no tape inside the block (used by the sampler)"""
    previous = _GRAD_STATE['enabled']
    _GRAD_STATE['enabled'] = False
    try:
        yield
    finally:
        _GRAD_STATE['enabled'] = previous


def is_grad_enabled():
    return _GRAD_STATE['enabled']


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """
    Dense n-dimensional float64 value with an optional gradient buffer.

    Scalars are stored with shape (1,) so every extent is positive.
    Tensors produced by an op keep references to their parents and a closure
    that pushes the output gradient back to them.
    """

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = 'leaf'

    # --- basic properties ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Row-major flat view of the data"""
        return self.data.ravel()

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # --- autodiff ---

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad"""
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.array(grad, dtype=DTYPE).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- operator sugar ---

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(arr, parents, op, backward):
    out = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=DTYPE)
    out.data = arr.reshape(1) if arr.ndim == 0 else arr
    out.grad = None
    tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = tuple(parents) if tracked else ()
    out._backward = backward if tracked else None
    out._op = op
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=DTYPE)
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============================================================================
# ELEMENTWISE OPS
# ============================================================================

def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast('add', a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), 'add', backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast('sub', a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _result(a.data - b.data, (a, b), 'sub', backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast('mul', a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), 'mul', backward)


def scale(x, factor):
    """Multiply by a Python constant"""
    factor = float(factor)

    def backward(g):
        _accumulate(x, g * factor)
    return _result(x.data * factor, (x,), 'scale', backward)


def square(x):
    def backward(g):
        _accumulate(x, 2.0 * x.data * g)
    return _result(x.data * x.data, (x,), 'square', backward)


def tanh(x):
    y = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - y * y))
    return _result(y, (x,), 'tanh', backward)


def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig

    def backward(g):
        _accumulate(x, g * (sig + x.data * sig * (1.0 - sig)))
    return _result(y, (x,), 'silu', backward)


# ============================================================================
# SHAPE OPS
# ============================================================================

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError('reshape', x.shape, shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))
    return _result(x.data.reshape(shape), (x,), 'reshape', backward)


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))
    return _result(np.transpose(x.data, axes), (x,), 'transpose', backward)


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors, axis=0):
    """Concatenate along an existing axis"""
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        same = t.ndim == tensors[0].ndim and all(
            t.shape[i] == tensors[0].shape[i] for i in range(t.ndim) if i != axis
        )
        if not same:
            raise ShapeError('concat', tensors[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, 'concat', backward)


def take(x, axis, start, stop):
    """Contiguous slice [start, stop) along one axis"""
    axis = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError('take', x.shape, (start, stop))
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)
    return _result(x.data[index].copy(), (x,), 'take', backward)


# ============================================================================
# REDUCTIONS AND LINEAR ALGEBRA
# ============================================================================

def total(x):
    """Sum of all entries, shape (1,)"""
    def backward(g):
        _accumulate(x, np.full(x.shape, g.reshape(-1)[0]))
    return _result(np.array([x.data.sum()]), (x,), 'sum', backward)


def mean(x):
    n = x.size

    def backward(g):
        _accumulate(x, np.full(x.shape, g.reshape(-1)[0] / n))
    return _result(np.array([x.data.sum() / n]), (x,), 'mean', backward)


def matmul(a, b):
    """
    Matrix product over the last two axes (leading axes broadcast).

    Args:
        a: Tensor[..., m, k]
        b: Tensor[..., k, n]

    Returns:
        Tensor[..., m, n]
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError('matmul', a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _result(a.data @ b.data, (a, b), 'matmul', backward)


def softmax_lastdim(x):
    """Numerically stable softmax over the last axis"""
    if x.shape[-1] < 1:
        raise ContractError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _result(y, (x,), 'softmax', backward)


def layer_norm(x, gain, bias):
    """
    Normalize every last-axis slice to zero mean / unit variance, then apply gain and bias.

    Args:
        x: Tensor[..., d]
        gain, bias: Tensor[d]
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError('layer_norm', x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)
    return _result(out, (x, gain, bias), 'layer_norm', backward)


def gather_rows(src, index, weights):
    """
    Weighted row gather: out[p] = sum_k weights[p, k] * src[index[p, k]].

    Covers embedding lookups (one index, weight 1) and bilinear sampling
    (four corner indices with interpolation weights). Differentiable in src only.

    Args:
        src: Tensor[N, C]
        index: int array [P, K]
        weights: float array [P, K]

    Returns:
        Tensor[P, C]
    """
    index = np.asarray(index, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    if src.ndim != 2 or index.shape != weights.shape or index.ndim != 2:
        raise ShapeError('gather_rows', src.shape, index.shape, weights.shape)
    if index.size and (index.min() < 0 or index.max() >= src.shape[0]):
        raise ContractError(f"gather_rows index outside [0, {src.shape[0]})")
    out = np.einsum('pk,pkc->pc', weights, src.data[index]) if index.size else np.zeros((0, src.shape[1]))

    def backward(g):
        full = np.zeros_like(src.data)
        for k in range(index.shape[1]):
            np.add.at(full, index[:, k], weights[:, k, None] * g)
        _accumulate(src, full)
    return _result(out, (src,), 'gather_rows', backward)


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def grad_check(f, x, h=1e-5, coords=None):
    """
    Compare the tape gradient of a scalar function against central differences.

    Args:
        f: Callable taking a Tensor and returning a single-element Tensor
        x: Point of evaluation (not modified)
        h: Finite-difference step
        coords: Optional iterable of flat coordinates to check (default: all)

    Returns:
        float: max_j |analytic_j - fd_j| / max(1, |fd_j|)
    """
    point = Tensor(x.data, requires_grad=True)
    out = _lift(f(point))
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    analytic = point.grad if point.grad is not None else np.zeros_like(point.data)

    coords = range(x.size) if coords is None else coords
    worst = 0.0
    for j in coords:
        fd = _central_difference(f, x.data, j, h)
        err = abs(analytic.reshape(-1)[j] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


def _central_difference(f, data, j, h):
    flat = data.reshape(-1)
    plus, minus = flat.copy(), flat.copy()
    plus[j] += h
    minus[j] -= h
    f_plus = _lift(f(Tensor(plus.reshape(data.shape)))).item()
    f_minus = _lift(f(Tensor(minus.reshape(data.shape)))).item()
    return (f_plus - f_minus) / (2.0 * h)


def grad_check_params(loss_fn, params, h=1e-5, coords_per_param=None, rng=None, names=None):
    """
    Gradient check of a loss over a named parameter dictionary.

    One backward pass gives every analytic gradient; each checked coordinate
    then costs two forward passes with a single parameter replaced.

    Args:
        loss_fn: Callable(params dict) -> single-element Tensor
        params: dict[str, Tensor]
        coords_per_param: Check at most this many random coordinates per parameter
        rng: numpy Generator used to pick coordinates
        names: Restrict the check to these parameter names

    Returns:
        dict[str, float]: worst relative error per parameter name
    """
    rng = rng if rng is not None else make_rng(0)
    names = sorted(params) if names is None else list(names)
    live = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
    out = loss_fn(live)
    if out.size != 1:
        raise ContractError(f"grad_check_params needs a scalar loss, got shape {out.shape}")
    if out.requires_grad:
        out.backward()

    report = {}
    for name in names:
        base = params[name]
        analytic = live[name].grad if live[name].grad is not None else np.zeros_like(base.data)
        n = base.size
        if coords_per_param is None or coords_per_param >= n:
            coords = range(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)

        def f(p, name=name):
            swapped = dict(params)
            swapped[name] = p
            return loss_fn(swapped)

        worst = 0.0
        for j in coords:
            fd = _central_difference(f, base.data, int(j), h)
            worst = max(worst, abs(analytic.reshape(-1)[j] - fd) / max(1.0, abs(fd)))
        report[name] = worst
    return report


# ============================================================================
# RANDOMNESS
# ============================================================================

def make_rng(seed):
    """Seeded PCG64 generator; all randomness in the project flows through these"""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, n):
    """Independent, reproducible child streams (one per batch element)"""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def randn(rng, shape, std=1.0, requires_grad=False):
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(path, params, metadata=None):
    """
    Write named parameters as a JSON header plus little-endian float64 payload.

    Args:
        path: Output file
        params: dict[str, Tensor]
        metadata: Optional JSON-serializable dict stored in the header
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.ascontiguousarray(t.data, dtype='<f8') for name, t in params.items()}
    header_meta = {'config': json.dumps(metadata, sort_keys=True)} if metadata is not None else None
    save_file(arrays, str(path), metadata=header_meta)
    logger.debug("saved %d tensors to %s", len(arrays), path)
    return path


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        tuple: (dict[str, Tensor], metadata dict or None)
    """
    path = Path(path)
    if not path.exists():
        raise ContractError(f"checkpoint not found: {path}")
    arrays = load_file(str(path))
    with safe_open(str(path), framework='numpy') as handle:
        meta = handle.metadata()
    metadata = json.loads(meta['config']) if meta and 'config' in meta else None
    params = {name: Tensor(arr.astype(DTYPE)) for name, arr in arrays.items()}
    return params, metadata
