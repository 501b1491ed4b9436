"""
Attention Module
Multi-head self/cross attention, the two gated variants and per-position temporal attention
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.errors import ContractError, ShapeError
from core.tensor_core import (
    MASK_FILL,
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    mul,
    ones,
    reshape,
    scale,
    softmax_lastdim,
    swap_last,
    take,
    tanh,
    transpose,
    zeros,
)

DEFAULT_N_HEADS = 4


@dataclass
class AttentionParams:
    """Projections and pre-norm of one attention layer"""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    n_heads: int = DEFAULT_N_HEADS
    context_gain: Optional[Tensor] = None
    context_bias: Optional[Tensor] = None

    def __post_init__(self):
        dim = self.w_q.shape[0]
        if dim % self.n_heads != 0:
            raise ContractError(f"dim {dim} is not divisible by n_heads {self.n_heads}")

    @property
    def dim(self):
        return self.w_q.shape[0]

    @classmethod
    def from_params(cls, params, prefix, n_heads=DEFAULT_N_HEADS):
        """Collect '<prefix>.w_q', ... from a flat parameter dict"""
        return cls(
            w_q=params[f'{prefix}.w_q'],
            w_k=params[f'{prefix}.w_k'],
            w_v=params[f'{prefix}.w_v'],
            w_o=params[f'{prefix}.w_o'],
            norm_gain=params[f'{prefix}.norm_gain'],
            norm_bias=params[f'{prefix}.norm_bias'],
            n_heads=n_heads,
            context_gain=params.get(f'{prefix}.context_gain'),
            context_bias=params.get(f'{prefix}.context_bias'),
        )


@dataclass
class GateParam:
    """Learnable scalar gate; the residual branch is scaled by tanh(beta)"""
    beta: Tensor

    @property
    def value(self):
        return float(np.tanh(self.beta.item()))


def init_attention(rng, dim, prefix, cross=False, zero_output=False, std=None):
    """
    Fresh parameters for one attention layer.

    Args:
        rng: numpy Generator
        dim: Token width
        prefix: Name prefix in the parameter dict
        cross: Also create the context pre-norm
        zero_output: Start with w_o = 0 so the layer is an identity residual
        std: Projection init scale (default 1/sqrt(dim))

    Returns:
        dict[str, Tensor]
    """
    std = std if std is not None else 1.0 / np.sqrt(dim)
    params = {
        f'{prefix}.w_q': Tensor(rng.standard_normal((dim, dim)) * std, requires_grad=True),
        f'{prefix}.w_k': Tensor(rng.standard_normal((dim, dim)) * std, requires_grad=True),
        f'{prefix}.w_v': Tensor(rng.standard_normal((dim, dim)) * std, requires_grad=True),
        f'{prefix}.w_o': Tensor(
            np.zeros((dim, dim)) if zero_output else rng.standard_normal((dim, dim)) * std,
            requires_grad=True,
        ),
        f'{prefix}.norm_gain': ones((dim,), requires_grad=True),
        f'{prefix}.norm_bias': zeros((dim,), requires_grad=True),
    }
    if cross:
        params[f'{prefix}.context_gain'] = ones((dim,), requires_grad=True)
        params[f'{prefix}.context_bias'] = zeros((dim,), requires_grad=True)
    return params


# ============================================================================
# CORE MULTI-HEAD ATTENTION
# ============================================================================

def _split_heads(x, n_heads):
    # [..., n, d] -> [..., h, n, d/h]
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    x = reshape(x, lead + (n, n_heads, d // n_heads))
    k = len(lead)
    return transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x):
    # [..., h, n, dh] -> [..., n, h*dh]
    lead = x.shape[:-3]
    h, n, dh = x.shape[-3:]
    k = len(lead)
    x = transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return reshape(x, lead + (n, h * dh))


def _key_bias(key_mask, lead_ndim):
    """Additive logit bias [..., 1, 1, n] from a boolean key mask [..., n]"""
    bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_FILL)
    lead = bias.shape[:-1]
    bias = bias.reshape(lead + (1, 1, bias.shape[-1]))
    while bias.ndim < lead_ndim + 3:
        bias = bias[None]
    return Tensor(bias)


def attention_branch(queries, context, params, key_mask=None):
    """
    Multi-head scaled dot-product attention without residual or pre-norm.

    Args:
        queries: Tensor[..., m, d] (already normalized)
        context: Tensor[..., n, d] (already normalized)
        params: AttentionParams
        key_mask: Optional bool array [..., n]; False keys are never attended to

    Returns:
        Tensor[..., m, d] after the output projection
    """
    d = params.dim
    if queries.shape[-1] != d or context.shape[-1] != d:
        raise ShapeError('attention', queries.shape, context.shape, (d, d))
    h = params.n_heads
    q = _split_heads(matmul(queries, params.w_q), h)
    k = _split_heads(matmul(context, params.w_k), h)
    v = _split_heads(matmul(context, params.w_v), h)
    logits = scale(matmul(q, swap_last(k)), 1.0 / np.sqrt(d // h))
    if key_mask is not None:
        logits = add(logits, _key_bias(key_mask, queries.ndim - 2))
    weights = softmax_lastdim(logits)
    return matmul(_merge_heads(matmul(weights, v)), params.w_o)


def _check_mask(mask, n, what):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n:
        raise ShapeError(what, mask.shape, (n,))
    if not mask.any(axis=-1).all():
        raise ContractError(f"{what}: every token of a sequence is masked")
    return mask


def _query_gate(mask):
    return Tensor(np.asarray(mask, dtype=np.float64)[..., None])


def self_branch(tokens, params, mask=None):
    """Pre-norm self-attention output (no residual); masked tokens output zero"""
    if tokens.shape[-2] < 1:
        raise ContractError("self-attention over an empty sequence")
    if mask is not None:
        mask = _check_mask(mask, tokens.shape[-2], 'self_attention')
    normed = layer_norm(tokens, params.norm_gain, params.norm_bias)
    out = attention_branch(normed, normed, params, key_mask=mask)
    if mask is not None:
        out = mul(out, _query_gate(mask))
    return out


def self_attention(tokens, params, mask=None):
    """
    Residual pre-norm multi-head self-attention.

    Args:
        tokens: Tensor[..., n, d]
        params: AttentionParams
        mask: Optional bool array [..., n]; masked tokens neither attend nor are attended to

    Returns:
        Tensor[..., n, d]
    """
    return add(tokens, self_branch(tokens, params, mask))


def cross_branch(queries, context, params, mask=None):
    """Pre-norm cross-attention output (no residual)"""
    if context.shape[-2] < 1:
        raise ContractError("cross-attention with an empty context")
    if mask is not None:
        mask = _check_mask(mask, context.shape[-2], 'cross_attention')
    gain = params.context_gain if params.context_gain is not None else params.norm_gain
    bias = params.context_bias if params.context_bias is not None else params.norm_bias
    q = layer_norm(queries, params.norm_gain, params.norm_bias)
    c = layer_norm(context, gain, bias)
    return attention_branch(q, c, params, key_mask=mask)


def cross_attention(queries, context, params, mask=None):
    """
    Residual cross-attention of queries over a context sequence.

    Args:
        queries: Tensor[..., m, d]
        context: Tensor[..., n, d]
        mask: Optional bool array [..., n] over context tokens

    Returns:
        Tensor[..., m, d]
    """
    return add(queries, cross_branch(queries, context, params, mask))


# ============================================================================
# GATED VARIANTS
# ============================================================================

def gated_self_attention(v_t, loc_tokens, params, gate, loc_mask=None):
    """
    V + tanh(beta) * TS(SelfAttn([V, H'])), keeping only the visual positions.

    Args:
        v_t: Tensor[..., M, d] visual tokens
        loc_tokens: Tensor[..., N, d] condition tokens (N may be 0) or None
        params: AttentionParams
        gate: GateParam
        loc_mask: Optional bool array [..., N]; False condition tokens are ignored

    Returns:
        Tensor[..., M, d]
    """
    m = v_t.shape[-2]
    if m < 1:
        raise ContractError("gated self-attention needs at least one visual token")
    if loc_tokens is None or loc_tokens.shape[-2] == 0:
        joint, mask = v_t, None
    else:
        joint = concat([v_t, loc_tokens], axis=-2)
        mask = None
        if loc_mask is not None:
            loc_mask = np.asarray(loc_mask, dtype=bool)
            visual = np.ones(loc_mask.shape[:-1] + (m,), dtype=bool)
            mask = np.concatenate([visual, loc_mask], axis=-1)
    branch = self_branch(joint, params, mask)
    selected = take(branch, -2, 0, m)
    return add(v_t, mul(tanh(gate.beta), selected))


def gated_cross_attention(v, inst_feats, params, gate, mask=None):
    """
    V + tanh(gamma) * CrossAttn(V -> F'); identity when the context is empty.

    Args:
        v: Tensor[..., M, d]
        inst_feats: Tensor[..., K, d] flattened enhanced instance tokens, or None
        mask: Optional bool array [..., K]
    """
    if inst_feats is None or inst_feats.shape[-2] == 0:
        return v
    branch = cross_branch(v, inst_feats, params, mask)
    return add(v, mul(tanh(gate.beta), branch))


def temporal_attention(latent, params):
    """
    Self-attention along time, independently at every spatial position.

    Args:
        latent: Tensor[T, H, W, C]

    Returns:
        Tensor[T, H, W, C]
    """
    if latent.ndim != 4 or latent.shape[0] < 1:
        raise ContractError(f"temporal attention expects [T, H, W, C], got {latent.shape}")
    frames, height, width, channels = latent.shape
    per_position = reshape(transpose(latent, (1, 2, 0, 3)), (height * width, frames, channels))
    attended = self_attention(per_position, params)
    back = reshape(attended, (height, width, frames, channels))
    return transpose(back, (2, 0, 1, 3))
