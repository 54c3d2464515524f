"""Shared classification heads and the joint training objective.

One liveness head and one modality head serve every sequence: each is a
layer norm followed by a single linear map from the relevant agent row
(class row for liveness, modality row for modality). The cross sequence
carries two class rows, whose logits average into one score; it has no
single modality, so the modality head rejects it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .encoder import EncoderState
from .errors import ConfigError, ContractError
from .store import ParamStore
from .tensor import (
    Tensor,
    add,
    bce_with_logit,
    layernorm,
    matmul,
    mean_all,
    scale,
    slice_axis,
)
from .tokenize import TokenSequence


def init_head_params(store: ParamStore, config: ModelConfig, rng: np.random.Generator) -> None:
    d = config.embed_dim
    s = 1.0 / np.sqrt(d)
    store.create("head.ln.g", np.ones(d))
    store.create("head.ln.b", np.zeros(d))
    store.create("head.cls.w", rng.uniform(-s, s, size=(d, 1)))
    store.create("head.cls.b", np.zeros(1))
    store.create("head.mod.w", rng.uniform(-s, s, size=(d, 1)))
    store.create("head.mod.b", np.zeros(1))


def _row_logit(seq: Tensor, row: int, store: ParamStore, head: str) -> Tensor:
    token = slice_axis(seq, -2, row, row + 1)
    normed = layernorm(token, store["head.ln.g"], store["head.ln.b"])
    return add(matmul(normed, store[f"head.{head}.w"]), store[f"head.{head}.b"])


def liveness_logit(seq: TokenSequence, store: ParamStore) -> Tensor:
    """Liveness logit from the class row, shape (..., 1, 1).

    The cross sequence stacks the two direction outputs along the batch
    axis, so it carries two class rows per sample ((2N, D) flat, or
    (2B, N, D) batched direction-major); their logits average into one
    score.
    """
    if seq.modality is not None:
        return _row_logit(seq.tokens, 0, store, "cls")
    tokens = seq.tokens
    if tokens.data.ndim == 2:
        half = tokens.shape[0] // 2
        first = _row_logit(tokens, 0, store, "cls")
        second = _row_logit(tokens, half, store, "cls")
    else:
        half = tokens.shape[0] // 2
        both = _row_logit(tokens, 0, store, "cls")
        first = slice_axis(both, 0, 0, half)
        second = slice_axis(both, 0, half, 2 * half)
    return scale(add(first, second), 0.5)


def modality_logit(seq: TokenSequence, store: ParamStore) -> Tensor:
    """Modality logit from the modality row; undefined for the cross
    sequence, whose content is deliberately modality-mixed."""
    if seq.modality is None:
        raise ContractError("modality head does not apply to the cross sequence")
    return _row_logit(seq.tokens, 1, store, "mod")


@dataclass
class LabeledPair:
    """One training example: image per modality plus its labels."""

    images: dict[str, np.ndarray]
    y_cls: int  # 0 attack, 1 bonafide


def modality_target(config: ModelConfig, tag: str) -> float:
    """Binary modality label; only two-modality training is defined for a
    single-logit head."""
    idx = config.modality(tag).spectrum_index
    if idx not in (0, 1):
        raise ConfigError(
            "modality loss with a single-logit head supports spectrum indices 0 and 1; "
            f"got {idx} for {tag!r}"
        )
    return float(idx)


def total_loss(
    state: EncoderState,
    y_cls,
    store: ParamStore,
    config: ModelConfig,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Joint objective: per-modality liveness + cross liveness + modality.

    ``y_cls`` may be a scalar or a per-sample array matching the leading
    dims. Each term is averaged over those dims; the total is the sum of
    the named terms, so the breakdown always adds up exactly. The cross
    term is counted once, not once per modality. A missing cross sequence
    (single-modality batch) drops that term with a warning.
    """
    terms: dict[str, Tensor] = {}
    for tag, seq in state.sequences.items():
        terms[f"cls_{tag}"] = mean_all(bce_with_logit(liveness_logit(seq, store), y_cls))
    if state.cross is not None:
        terms["cls_cross"] = mean_all(
            bce_with_logit(liveness_logit(state.cross, store), y_cls)
        )
    elif config.use_cma and len(config.modalities) == 2:
        warnings.warn("cross-sequence liveness term omitted: no cross sequence present")
    for tag, seq in state.sequences.items():
        target = modality_target(config, tag)
        terms[f"mod_{tag}"] = mean_all(
            bce_with_logit(modality_logit(seq, store), target)
        )
    total = None
    for name in sorted(terms):
        total = terms[name] if total is None else add(total, terms[name])
    return total, terms
