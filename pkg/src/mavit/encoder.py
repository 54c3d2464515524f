"""Transformer blocks: standard block, disentangling update, cross fusion.

One encoder block runs, in order:

1. the standard sub-block (pre-norm attention + pre-norm MLP, residuals)
   on every modal sequence with one shared set of weights;
2. the cross-fusion step, reading both modal sequences as they entered
   the block and updating the stacked cross sequence (skipping the
   residual in block 0, where no previous cross sequence exists);
3. the disentangling step, which rewrites only the class row of each
   modal sequence and passes every other row through untouched.

Cross fusion owns no weights at all: its input norm, attention
projections, and MLP all alias the standard sub-block's slots (it
normalizes the same block inputs the standard attention sees), so it
contributes zero parameters. The disentangling step owns its
projections, output map, and a dedicated input norm, since it consumes
the standard sub-block's output rather than the block input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    MaskRecord,
    cross_attention,
    disentangle_attention,
    load_attention_params,
    self_attention,
)
from .config import ModelConfig
from .errors import ContractError
from .store import ParamStore
from .tensor import Tensor, add, concat, gelu, layernorm, matmul, reshape, slice_axis
from .tokenize import TokenSequence


def init_block_params(store: ParamStore, config: ModelConfig, k: int, rng: np.random.Generator) -> None:
    """Create block ``k``'s parameters and sharing links.

    Projection matrices and embeddings draw from U(-1/sqrt(D), 1/sqrt(D));
    norm gains start at 1, all biases at 0. Creation order is fixed so a
    seeded generator reproduces the same model bit for bit.
    """
    d = config.embed_dim
    dh = config.head_dim
    hidden = config.mlp_hidden
    s = 1.0 / np.sqrt(d)

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    def norm(name):
        store.create(f"{name}.g", np.ones(d))
        store.create(f"{name}.b", np.zeros(d))

    p = f"block{k}"
    norm(f"{p}.ln1")
    for i in range(config.heads):
        for w in ("wq", "wk", "wv"):
            store.create(f"{p}.msa.h{i}.{w}", u(d, dh))
    store.create(f"{p}.msa.wo", u(d, d))
    norm(f"{p}.ln2")
    store.create(f"{p}.mlp.w1", u(d, hidden))
    store.create(f"{p}.mlp.b1", np.zeros(hidden))
    store.create(f"{p}.mlp.w2", u(hidden, d))
    store.create(f"{p}.mlp.b2", np.zeros(d))
    if config.use_mda:
        norm(f"{p}.lnm")
        for i in range(config.heads):
            for w in ("wq", "wk", "wv", "wqm", "wkm"):
                store.create(f"{p}.mda.h{i}.{w}", u(d, dh))
        store.create(f"{p}.mda.wo", u(d, d))
    if config.use_cma:
        # the cross path owns nothing: its input norm is the block's first
        # norm (both normalize the sequences entering the block), and its
        # attention and MLP weights are the standard sub-block's
        store.alias(f"{p}.lnc.g", f"{p}.ln1.g")
        store.alias(f"{p}.lnc.b", f"{p}.ln1.b")
        for i in range(config.heads):
            for w in ("wq", "wk", "wv"):
                store.alias(f"{p}.cma.h{i}.{w}", f"{p}.msa.h{i}.{w}")
        store.alias(f"{p}.cma.ln2.g", f"{p}.ln2.g")
        store.alias(f"{p}.cma.ln2.b", f"{p}.ln2.b")
        for w in ("w1", "b1", "w2", "b2"):
            store.alias(f"{p}.cma.mlp.{w}", f"{p}.mlp.{w}")


def _norm(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return layernorm(x, store[f"{name}.g"], store[f"{name}.b"])


def _mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    h = add(matmul(x, store[f"{prefix}.w1"]), store[f"{prefix}.b1"])
    return add(matmul(gelu(h), store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


def stb_forward(z: Tensor, store: ParamStore, config: ModelConfig, k: int) -> Tensor:
    """Standard pre-norm block: attention then MLP, each with a residual."""
    p = f"block{k}"
    attn = self_attention(
        _norm(z, store, f"{p}.ln1"),
        load_attention_params(store, f"{p}.msa", config.heads),
    )
    z = add(z, attn)
    return add(z, _mlp(_norm(z, store, f"{p}.ln2"), store, f"{p}.mlp"))


def matb_mda_forward(
    z: Tensor,
    store: ParamStore,
    config: ModelConfig,
    k: int,
    mass: float,
    capture: list | None = None,
) -> Tensor:
    """Disentangling update: new class row, all other rows pass through."""
    p = f"block{k}"
    update = disentangle_attention(
        _norm(z, store, f"{p}.lnm"),
        mass,
        load_attention_params(store, f"{p}.mda", config.heads, with_mod=True),
        config,
        capture=capture,
    )
    n_tok = z.shape[-2]
    new_cls = add(slice_axis(z, -2, 0, 1), update)
    return concat([new_cls, slice_axis(z, -2, 1, n_tok)], axis=-2)


def matb_cma_forward(
    z_a: Tensor,
    z_b: Tensor,
    cross_prev: Tensor | None,
    store: ParamStore,
    config: ModelConfig,
    k: int,
) -> Tensor:
    """Cross-fusion update: both direction outputs stacked along the batch
    axis (so (N, D) inputs produce the (2N, D) cross sequence, batched
    (B, N, D) inputs produce (2B, N, D)).

    The residual is skipped when no previous cross sequence exists (block
    0); the shared MLP sub-block always applies.
    """
    p = f"block{k}"
    params = load_attention_params(store, f"{p}.cma", config.heads, with_wo=False)
    out_ab, out_ba = cross_attention(
        _norm(z_a, store, f"{p}.lnc"),
        _norm(z_b, store, f"{p}.lnc"),
        params,
        config,
    )
    stacked = concat([out_ab, out_ba], axis=0)
    if cross_prev is not None:
        stacked = add(stacked, cross_prev)
    return add(stacked, _mlp(_norm(stacked, store, f"{p}.cma.ln2"), store, f"{p}.cma.mlp"))


@dataclass
class EncoderState:
    """Final sequences per modality plus the fused cross sequence, if any."""

    sequences: dict[str, TokenSequence]
    cross: TokenSequence | None = None
    masks: dict[tuple[int, str], MaskRecord] = field(default_factory=dict)


def encode(
    seqs: dict[str, TokenSequence],
    store: ParamStore,
    config: ModelConfig,
    mask_mass: float | None = None,
    record_masks: bool = False,
) -> EncoderState:
    """Run all blocks over the provided modal sequences.

    The cross sequence exists only when exactly two modal sequences are
    supplied (and the cross path is enabled); single-modal input simply
    skips it.

    All modal sequences share every block weight, so they run stacked
    along the leading batch axis; each row is processed independently,
    which keeps the stacked pass bit-identical to per-modality passes.
    """
    if not seqs:
        raise ContractError("encode needs at least one modal sequence")
    tags = [m.tag for m in config.modalities if m.tag in seqs]
    if len(tags) != len(seqs):
        unknown = set(seqs) - set(tags)
        raise ContractError(f"sequences carry unregistered modalities: {sorted(unknown)}")
    mass = config.mask_mass if mask_mass is None else mask_mass
    use_cross = config.use_cma and len(tags) == 2

    lifted = seqs[tags[0]].tokens.data.ndim == 2
    parts = []
    for t in tags:
        tok = seqs[t].tokens
        parts.append(reshape(tok, (1, *tok.shape)) if lifted else tok)
    batch = parts[0].shape[0]
    stack = concat(parts, axis=0) if len(parts) > 1 else parts[0]

    cross: Tensor | None = None
    masks: dict[tuple[int, str], MaskRecord] = {}

    for k in range(config.blocks):
        entering = stack
        stack = stb_forward(entering, store, config, k)
        if use_cross:
            cross = matb_cma_forward(
                slice_axis(entering, 0, 0, batch),
                slice_axis(entering, 0, batch, 2 * batch),
                cross,
                store,
                config,
                k,
            )
        if config.use_mda:
            capture: list | None = [] if record_masks else None
            stack = matb_mda_forward(stack, store, config, k, mass, capture=capture)
            if record_masks:
                rec = capture[0]
                for i, t in enumerate(tags):
                    sel = slice(i * batch, (i + 1) * batch)
                    masks[(k, t)] = MaskRecord(
                        modality_mask=rec.modality_mask[sel],
                        attention_mask=rec.attention_mask[sel],
                        informative_mask=rec.informative_mask[sel],
                    )

    out = {}
    for i, t in enumerate(tags):
        part = slice_axis(stack, 0, i * batch, (i + 1) * batch) if len(tags) > 1 else stack
        if lifted:
            part = reshape(part, part.shape[1:])
        out[t] = TokenSequence(seqs[t].modality, part)
    cross_seq = None
    if cross is not None:
        if lifted:
            # single sample: (2, N, D) flattens to the documented (2N, D)
            cross = reshape(cross, (cross.shape[0] * cross.shape[1], cross.shape[2]))
        cross_seq = TokenSequence(None, cross)
    return EncoderState(sequences=out, cross=cross_seq, masks=masks)
