"""Attention primitives: standard, modal-disentangling, and cross-modal.

Three kernels share one geometry, (..., N, D) token sequences with per-head
D x (D/h) projections:

* ``self_attention`` is plain multi-head attention over the whole sequence.
* ``disentangle_attention`` lets the class token attend over patch tokens
  only, after a mask derived from the modality token's relevance map cuts
  the links to modality-related patches.
* ``cross_attention`` reads queries from one modal sequence and keys and
  values from the other, reusing the self-attention projections; it
  returns the two directions separately so the caller can stack them.

The mask pipeline is ``modality_relevance`` (raw scaled logits) ->
``threshold_mask`` (top-mass selection, non-differentiable) ->
``mask_select`` (sentinel fill). Masked logits become NEG_LARGE, which
underflows to an exactly-zero attention weight after softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._mm import _threshold_rows
from .config import ModelConfig
from .errors import ContractError, ShapeError
from .store import ParamStore
from .tensor import (
    Tensor,
    apply_mask,
    concat,
    matmul,
    merge_heads,
    reshape,
    scaled_product,
    slice_axis,
    softmax_rows,
    split_heads,
)


@dataclass
class AttentionParams:
    """Per-head projection weights, each D x (D/h).

    ``wq_mod``/``wk_mod`` exist only for the disentangling kernel (they
    project the modality token's query and the patch keys it scores).
    ``wo`` is absent for cross attention, which has no output projection
    of its own.
    """

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor | None = None
    wq_mod: list[Tensor] | None = None
    wk_mod: list[Tensor] | None = None

    @property
    def heads(self) -> int:
        return len(self.wq)


def load_attention_params(
    store: ParamStore, prefix: str, heads: int, with_mod: bool = False, with_wo: bool = True
) -> AttentionParams:
    """Resolve a parameter bundle by name prefix; aliases resolve to the
    shared storage slots, so sharing is by reference."""
    return AttentionParams(
        wq=[store[f"{prefix}.h{i}.wq"] for i in range(heads)],
        wk=[store[f"{prefix}.h{i}.wk"] for i in range(heads)],
        wv=[store[f"{prefix}.h{i}.wv"] for i in range(heads)],
        wo=store[f"{prefix}.wo"] if with_wo else None,
        wq_mod=[store[f"{prefix}.h{i}.wqm"] for i in range(heads)] if with_mod else None,
        wk_mod=[store[f"{prefix}.h{i}.wkm"] for i in range(heads)] if with_mod else None,
    )


def _tokens(z) -> Tensor:
    return z.tokens if hasattr(z, "tokens") else z


def _project(x: Tensor, weights: list[Tensor], heads: int) -> Tensor:
    """Apply per-head projections as one concatenated matmul.

    Column blocks of the concatenated weight are independent, so this is
    bit-identical to h separate products.
    """
    cat = concat(weights, axis=1) if heads > 1 else weights[0]
    return split_heads(matmul(x, cat), heads)


def _project_fused(x: Tensor, groups: list[list[Tensor]], heads: int) -> list[Tensor]:
    """Run several per-head projection groups over one input in a single
    product; returns one (..., heads, N, D/heads) tensor per group.

    Independent output columns again make this bit-identical to separate
    per-head products.
    """
    if len(groups) == 1:
        return [_project(x, groups[0], heads)]
    flat = [w for grp in groups for w in grp]
    out = matmul(x, concat(flat, axis=1))
    parts = []
    offset = 0
    for grp in groups:
        width = sum(w.shape[1] for w in grp)
        parts.append(split_heads(slice_axis(out, -1, offset, offset + width), heads))
        offset += width
    return parts


def _scaled_scores(q: Tensor, k: Tensor, head_dim: int) -> Tensor:
    return scaled_product(q, k, 1.0 / math.sqrt(head_dim))


def self_attention(z, params: AttentionParams) -> Tensor:
    """Multi-head self-attention with output projection, (..., N, D)."""
    x = _tokens(z)
    h = params.heads
    dh = x.shape[-1] // h
    q, k, v = _project_fused(x, [params.wq, params.wk, params.wv], h)
    weights = softmax_rows(_scaled_scores(q, k, dh))
    out = merge_heads(matmul(weights, v))
    return matmul(out, params.wo)


def modality_relevance(z, params: AttentionParams, config: ModelConfig) -> Tensor:
    """Scaled relevance of each patch token to the modality token's query.

    Returns raw (pre-softmax) scores of shape (..., heads, 1, n).
    """
    x = _tokens(z)
    n_tok = x.shape[-2]
    mod_row = slice_axis(x, -2, 1, 2)
    patches = slice_axis(x, -2, 2, n_tok)
    q = _project(mod_row, params.wq_mod, params.heads)
    k = _project(patches, params.wk_mod, params.heads)
    return _scaled_scores(q, k, config.head_dim)


def relevance_weights(relevance) -> np.ndarray:
    """Row-softmax of a relevance map, exactly as the mask selection sees
    it (same stabilization and summation order)."""
    x = relevance.data if isinstance(relevance, Tensor) else np.asarray(relevance, float)
    n = x.shape[-1]
    x2 = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, n)
    mask = np.empty_like(x2, dtype=np.uint8)
    weights = np.empty_like(x2)
    _threshold_rows(x2, 0.0, mask, weights)
    return weights.reshape(x.shape)


def threshold_mask(relevance, mass: float) -> np.ndarray:
    """Select the minimal top-mass set of patch tokens, per head row.

    Each row of the relevance map is softmaxed; tokens are taken in
    descending weight order (ties broken toward the lower index) until
    the selected cumulative mass reaches ``mass``. Selected positions are
    1, meaning modality-related and to be discarded. If a row would mask
    every token, the lowest-relevance one is unmasked again so at least
    one attention link always survives.

    This selection is discrete and carries no gradient.
    """
    if not 0.0 <= mass <= 1.0:
        raise ContractError(f"mass must lie in [0, 1], got {mass}")
    x = relevance.data if isinstance(relevance, Tensor) else np.asarray(relevance, float)
    shape = x.shape
    n = shape[-1]
    x2 = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, n)
    mask = np.empty_like(x2, dtype=np.uint8)
    weights = np.empty_like(x2)
    _threshold_rows(x2, mass, mask, weights)
    return mask.reshape(shape)


def mask_select(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Disconnect masked links by filling their logits with the sentinel.

    Rejects masks that would silence an entire row; the survivor rule in
    ``threshold_mask`` guarantees well-formed inputs.
    """
    if scores.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    if np.any(np.all(mask != 0, axis=-1)):
        raise ContractError("mask discards every token in a row")
    return apply_mask(scores, mask)


@dataclass
class MaskRecord:
    """Per-head binary grids captured from one disentangling step.

    ``modality_mask`` marks the discarded modality-related tokens;
    ``attention_mask`` is the top-mass set of the unmasked class-token
    attention; ``informative_mask`` is the top-mass set after masking,
    i.e. the tokens the final decision actually draws on.
    """

    modality_mask: np.ndarray
    attention_mask: np.ndarray
    informative_mask: np.ndarray


def disentangle_attention(
    z,
    mass: float,
    params: AttentionParams,
    config: ModelConfig,
    capture: list | None = None,
) -> Tensor:
    """Class-token attention over patch tokens with modality-related ones
    disconnected; returns the (..., 1, D) class-row update only."""
    x = _tokens(z)
    n_tok = x.shape[-2]
    h = params.heads
    cls_row = slice_axis(x, -2, 0, 1)
    mod_row = slice_axis(x, -2, 1, 2)
    patches = slice_axis(x, -2, 2, n_tok)
    q = _project(cls_row, params.wq, h)
    q_mod = _project(mod_row, params.wq_mod, h)
    k, v, k_mod = _project_fused(patches, [params.wk, params.wv, params.wk_mod], h)
    cls_scores = _scaled_scores(q, k, config.head_dim)
    rel = _scaled_scores(q_mod, k_mod, config.head_dim)
    mask = threshold_mask(rel, mass)
    masked = mask_select(cls_scores, mask)
    if capture is not None:
        capture.append(
            MaskRecord(
                modality_mask=mask.copy(),
                attention_mask=threshold_mask(cls_scores.data, mass),
                informative_mask=threshold_mask(masked.data, mass),
            )
        )
    weights = softmax_rows(masked)
    out = merge_heads(matmul(weights, v))
    return matmul(out, params.wo)


def cross_attention(z_a, z_b, params: AttentionParams, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Attend each sequence over the other with shared projections.

    First output: queries from ``z_a``, keys/values from ``z_b``; second
    output swaps the roles. No output projection is applied; the caller
    stacks the two (..., N, D) results along the batch dimension.

    Both directions run as one attention pass over inputs stacked along
    the leading axis; every row is computed independently, so the result
    is bit-identical to two separate passes.
    """
    xa, xb = _tokens(z_a), _tokens(z_b)
    if xa.shape != xb.shape:
        raise ShapeError(f"cross attention needs equal shapes, got {xa.shape} and {xb.shape}")
    lifted = xa.data.ndim == 2
    if lifted:
        xa = reshape(xa, (1, *xa.shape))
        xb = reshape(xb, (1, *xb.shape))
    half = xa.shape[0]
    x_q = concat([xa, xb], axis=0)
    x_kv = concat([xb, xa], axis=0)
    q = _project(x_q, params.wq, params.heads)
    k, v = _project_fused(x_kv, [params.wk, params.wv], params.heads)
    weights = softmax_rows(_scaled_scores(q, k, config.head_dim))
    out = merge_heads(matmul(weights, v))
    out_ab = slice_axis(out, 0, 0, half)
    out_ba = slice_axis(out, 0, half, 2 * half)
    if lifted:
        out_ab = reshape(out_ab, out_ab.shape[1:])
        out_ba = reshape(out_ba, out_ba.shape[1:])
    return out_ab, out_ba


def mask_to_grids(mask: np.ndarray) -> np.ndarray:
    """Reshape one (heads, 1, n) binary mask into (heads, side, side) grids."""
    heads, _, n = mask.shape
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"token count {n} is not a square grid")
    return mask.reshape(heads, side, side)
