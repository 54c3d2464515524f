import itertools
import math

import numpy as np
import numpy.testing as npt
import pytest

from mavit.attention import (
    AttentionParams,
    cross_attention,
    disentangle_attention,
    mask_select,
    mask_to_grids,
    modality_relevance,
    relevance_weights,
    self_attention,
    threshold_mask,
)
from mavit.config import ModelConfig
from mavit.errors import ContractError, ShapeError
from mavit.tensor import (
    NEG_LARGE,
    Tensor,
    backward,
    concat,
    matmul,
    softmax_rows,
    sum_all,
)


def make_params(rng, d, heads, with_mod=False, with_wo=True, requires_grad=False):
    dh = d // heads

    def w():
        return Tensor(rng.standard_normal((d, dh)) * 0.3, requires_grad=requires_grad)

    return AttentionParams(
        wq=[w() for _ in range(heads)],
        wk=[w() for _ in range(heads)],
        wv=[w() for _ in range(heads)],
        wo=Tensor(rng.standard_normal((d, d)) * 0.3, requires_grad=requires_grad)
        if with_wo
        else None,
        wq_mod=[w() for _ in range(heads)] if with_mod else None,
        wk_mod=[w() for _ in range(heads)] if with_mod else None,
    )


def np_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def msa_oracle(z, params, with_wo=True):
    """Per-head dense attention, plain numpy."""
    heads = []
    dh = params.wq[0].shape[1]
    for h in range(params.heads):
        q = z @ params.wq[h].data
        k = z @ params.wk[h].data
        v = z @ params.wv[h].data
        a = np_softmax(q @ k.T / math.sqrt(dh))
        heads.append(a @ v)
    out = np.concatenate(heads, axis=-1)
    return out @ params.wo.data if with_wo else out


# ---------------------------------------------------------------------------
# self-attention


def test_msa_single_token_reduces_to_value_projection():
    rng = np.random.default_rng(0)
    p = make_params(rng, 8, 2)
    z = Tensor(rng.standard_normal((1, 8)))
    out = self_attention(z, p)
    v = np.concatenate([z.data @ p.wv[h].data for h in range(2)], axis=-1)
    npt.assert_allclose(out.data, v @ p.wo.data, rtol=0, atol=1e-12)


def test_msa_identical_tokens_give_identical_rows():
    rng = np.random.default_rng(1)
    p = make_params(rng, 8, 2)
    z = Tensor(np.tile(rng.standard_normal((1, 8)), (5, 1)))
    out = self_attention(z, p).data
    for r in range(1, 5):
        npt.assert_allclose(out[r], out[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_msa_matches_per_head_oracle(seed):
    rng = np.random.default_rng(seed)
    p = make_params(rng, 8, 2)
    z = rng.standard_normal((4, 8))
    out = self_attention(Tensor(z), p)
    npt.assert_allclose(out.data, msa_oracle(z, p), rtol=0, atol=1e-12)


def test_attention_weight_rows_sum_to_one():
    rng = np.random.default_rng(4)
    scores = rng.standard_normal((3, 2, 6, 6)) * 5
    w = softmax_rows(Tensor(scores)).data
    npt.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# modality relevance


def make_config(n_tokens_side=4, d=8, heads=2):
    return ModelConfig(
        image_size=8 * n_tokens_side // 2 if False else 32,
        patch_size=8,
        embed_dim=d,
        heads=heads,
        blocks=1,
    )


def test_modal_relevance_zero_query_weights():
    rng = np.random.default_rng(5)
    config = make_config()
    p = make_params(rng, 8, 2, with_mod=True)
    for h in range(2):
        p.wq_mod[h].data[...] = 0.0
    z = Tensor(rng.standard_normal((config.n_tokens, 8)))
    rel = modality_relevance(z, p, config)
    npt.assert_array_equal(rel.data, np.zeros((2, 1, config.n_patches)))


def test_modal_relevance_identical_patches_constant_row():
    rng = np.random.default_rng(6)
    config = make_config()
    p = make_params(rng, 8, 2, with_mod=True)
    z = np.vstack(
        [rng.standard_normal((2, 8)), np.tile(rng.standard_normal((1, 8)), (config.n_patches, 1))]
    )
    rel = modality_relevance(Tensor(z), p, config).data
    npt.assert_allclose(rel - rel[..., :1], 0.0, rtol=0, atol=1e-12)


def test_modal_relevance_matches_direct_formula():
    rng = np.random.default_rng(7)
    config = make_config()
    p = make_params(rng, 8, 2, with_mod=True)
    z = rng.standard_normal((config.n_tokens, 8))
    rel = modality_relevance(Tensor(z), p, config).data
    for h in range(2):
        q = z[1:2] @ p.wq_mod[h].data
        k = z[2:] @ p.wk_mod[h].data
        npt.assert_allclose(rel[h], q @ k.T / 2.0, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# threshold mask: brute-force minimal-subset oracle


def subset_mask_oracle(raw_row: np.ndarray, mass: float) -> np.ndarray:
    """Enumerate all subsets: minimal size with mass >= threshold, ties by
    maximal mass then earliest selection order (weight desc, index asc).
    Subset mass sums in that same selection order. Survivor rule applied
    afterward, exactly as specified.
    """
    n = raw_row.size
    weights = relevance_weights(raw_row.reshape(1, n))[0]
    order = sorted(range(n), key=lambda j: (-weights[j], j))
    rank = {j: r for r, j in enumerate(order)}
    if mass <= 0.0:
        return np.zeros(n, dtype=np.uint8)
    best = None
    for size in range(n + 1):
        for combo in itertools.combinations(range(n), size):
            seq = sorted(combo, key=lambda j: rank[j])
            total = 0.0
            for j in seq:
                total += weights[j]
            if total >= mass:
                key = (-total, tuple(rank[j] for j in seq))
                if best is None or key < best[0]:
                    best = (key, set(combo))
        if best is not None:
            break
    chosen = best[1] if best is not None else set(range(n))
    out = np.zeros(n, dtype=np.uint8)
    for j in chosen:
        out[j] = 1
    if len(chosen) == n:
        out[order[-1]] = 0
    return out


def test_threshold_mask_worked_example():
    # softmax weights 0.5/0.3/0.2 at threshold 0.8 need the top two
    w = np.array([0.5, 0.3, 0.2])
    row = np.log(w).reshape(1, 1, 1, 3)
    mask = threshold_mask(row, 0.8)
    npt.assert_array_equal(mask.reshape(-1), [1, 1, 0])
    npt.assert_array_equal(mask.reshape(-1), subset_mask_oracle(row.reshape(-1), 0.8))


def test_threshold_mask_zero_mass_empty():
    rng = np.random.default_rng(8)
    mask = threshold_mask(rng.standard_normal((2, 1, 7)), 0.0)
    npt.assert_array_equal(mask, np.zeros((2, 1, 7), dtype=np.uint8))


def test_threshold_mask_full_mass_leaves_one_survivor():
    rng = np.random.default_rng(9)
    mask = threshold_mask(rng.standard_normal((3, 1, 6)), 1.0)
    npt.assert_array_equal(mask.sum(axis=-1), np.full((3, 1), 5))


@pytest.mark.parametrize("mass", [0.0, 0.3, 0.5, 0.8, 1.0])
def test_threshold_mask_matches_subset_oracle(mass):
    rng = np.random.default_rng(10)
    for trial in range(40):
        n = int(rng.integers(2, 9))
        row = rng.standard_normal(n) * rng.uniform(0.5, 3.0)
        got = threshold_mask(row.reshape(1, 1, n), mass).reshape(-1)
        want = subset_mask_oracle(row, mass)
        npt.assert_array_equal(got, want, err_msg=f"trial={trial} n={n}")


def test_threshold_mask_tie_break_prefers_lower_index():
    row = np.zeros((1, 1, 4))  # all weights equal: pick indices 0,1 for 0.5
    mask = threshold_mask(row, 0.5)
    npt.assert_array_equal(mask.reshape(-1), [1, 1, 0, 0])


def test_threshold_mask_monotone_in_mass():
    rng = np.random.default_rng(11)
    for _ in range(25):
        row = rng.standard_normal((1, 2, 1, 8))
        masses = sorted(rng.uniform(0, 1, size=3))
        previous = threshold_mask(row, masses[0])
        for m in masses[1:]:
            current = threshold_mask(row, m)
            assert ((previous == 1) <= (current == 1)).all()
            previous = current


def test_threshold_mask_minimality():
    # selected mass reaches the target and the smallest selected weight is
    # load-bearing: removing it drops below the target (unless the
    # survivor rule clamped a full selection back to n-1 tokens)
    rng = np.random.default_rng(12)
    for _ in range(50):
        n = int(rng.integers(3, 10))
        row = rng.standard_normal(n)
        mass = float(rng.uniform(0.05, 0.99))
        sel = threshold_mask(row.reshape(1, 1, n), mass).reshape(-1)
        if sel.sum() == 0:
            continue
        weights = relevance_weights(row.reshape(1, n))[0]
        order = sorted(np.flatnonzero(sel), key=lambda j: (-weights[j], j))
        total = 0.0
        for j in order:
            total += weights[j]
        without_last = 0.0
        for j in order[:-1]:
            without_last += weights[j]
        if total >= mass:
            assert without_last < mass
        else:
            assert sel.sum() == n - 1


def test_threshold_mask_rejects_bad_mass():
    with pytest.raises(ContractError):
        threshold_mask(np.zeros((1, 1, 4)), 1.5)


# ---------------------------------------------------------------------------
# mask selection


def test_mask_select_identity_under_empty_mask():
    rng = np.random.default_rng(13)
    scores = Tensor(rng.standard_normal((2, 1, 5)))
    out = mask_select(scores, np.zeros((2, 1, 5), dtype=np.uint8))
    npt.assert_array_equal(out.data, scores.data)


def test_mask_select_sentinel_kills_weight():
    scores = Tensor(np.zeros((1, 1, 4)))
    mask = np.array([[[0, 1, 0, 0]]], dtype=np.uint8)
    out = mask_select(scores, mask)
    assert out.data[0, 0, 1] == NEG_LARGE
    w = softmax_rows(out).data
    assert w[0, 0, 1] < 1e-6


def test_mask_select_blocks_gradient():
    scores = Tensor(np.zeros((1, 1, 4)), requires_grad=True)
    mask = np.array([[[0, 1, 0, 0]]], dtype=np.uint8)
    backward(sum_all(softmax_rows(mask_select(scores, mask))))
    assert scores.grad[0, 0, 1] == 0.0


def test_mask_select_rejects_fully_masked_row():
    scores = Tensor(np.zeros((1, 1, 3)))
    with pytest.raises(ContractError):
        mask_select(scores, np.ones((1, 1, 3), dtype=np.uint8))


def test_mask_select_shape_mismatch():
    with pytest.raises(ShapeError):
        mask_select(Tensor(np.zeros((1, 1, 3))), np.zeros((1, 1, 4), dtype=np.uint8))


# ---------------------------------------------------------------------------
# disentangling attention


def cls_attention_reference(z, p, config):
    """Unmasked class-row attention from production primitives, assembled
    per head; bit-identical to the fused path by column independence."""
    n_tok = z.shape[0]
    dh = config.head_dim
    outs = []
    for h in range(p.heads):
        q = matmul(Tensor(z[0:1]), p.wq[h])
        k = matmul(Tensor(z[2:]), p.wk[h])
        v = matmul(Tensor(z[2:]), p.wv[h])
        scores = matmul(q, Tensor(k.data.T * (1.0 / math.sqrt(dh))))
        outs.append(matmul(softmax_rows(Tensor(scores.data)), v))
    merged = concat(outs, axis=-1)
    return matmul(merged, p.wo).data


def test_mda_zero_mass_equals_unmasked_attention_bitwise():
    rng = np.random.default_rng(14)
    config = make_config()
    p = make_params(rng, 8, 2, with_mod=True)
    z = rng.standard_normal((config.n_tokens, 8))
    out = disentangle_attention(Tensor(z), 0.0, p, config).data
    npt.assert_array_equal(out, cls_attention_reference(z, p, config))


def test_mda_identical_patches_mask_invariant():
    rng = np.random.default_rng(15)
    config = make_config()
    p = make_params(rng, 8, 2, with_mod=True)
    z = np.vstack(
        [rng.standard_normal((2, 8)), np.tile(rng.standard_normal((1, 8)), (config.n_patches, 1))]
    )
    low = disentangle_attention(Tensor(z), 0.0, p, config).data
    high = disentangle_attention(Tensor(z), 0.9, p, config).data
    npt.assert_allclose(low, high, rtol=0, atol=1e-12)


def test_mda_matches_column_deletion_oracle():
    rng = np.random.default_rng(16)
    config = make_config()
    p = make_params(rng, 8, 2, with_mod=True)
    z = rng.standard_normal((config.n_tokens, 8))
    mass = 0.8
    out = disentangle_attention(Tensor(z), mass, p, config).data

    rel = modality_relevance(Tensor(z), p, config).data
    mask = threshold_mask(rel, mass)
    heads = []
    for h in range(2):
        keep = np.flatnonzero(mask[h, 0] == 0)
        q = z[0:1] @ p.wq[h].data
        k = (z[2:] @ p.wk[h].data)[keep]
        v = (z[2:] @ p.wv[h].data)[keep]
        a = np_softmax(q @ k.T / math.sqrt(config.head_dim))
        heads.append(a @ v)
    expected = np.concatenate(heads, axis=-1) @ p.wo.data
    npt.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_mda_output_is_single_row():
    rng = np.random.default_rng(17)
    config = make_config()
    p = make_params(rng, 8, 2, with_mod=True)
    z = Tensor(rng.standard_normal((config.n_tokens, 8)))
    assert disentangle_attention(z, 0.5, p, config).shape == (1, 8)


def test_mda_capture_records_three_grids():
    rng = np.random.default_rng(18)
    config = make_config()
    p = make_params(rng, 8, 2, with_mod=True)
    z = Tensor(rng.standard_normal((config.n_tokens, 8)))
    capture = []
    disentangle_attention(z, 0.8, p, config, capture=capture)
    rec = capture[0]
    n = config.n_patches
    assert rec.modality_mask.shape == (2, 1, n)
    assert rec.attention_mask.shape == (2, 1, n)
    assert rec.informative_mask.shape == (2, 1, n)
    # informative tokens only come from the surviving set
    assert not np.any((rec.informative_mask == 1) & (rec.modality_mask == 1))


# ---------------------------------------------------------------------------
# cross attention


def test_cma_self_pair_equals_msa_pre_projection():
    rng = np.random.default_rng(19)
    config = make_config()
    p = make_params(rng, 8, 2, with_wo=False)
    z = rng.standard_normal((config.n_tokens, 8))
    out_ab, out_ba = cross_attention(Tensor(z), Tensor(z), p, config)
    expected = msa_oracle(z, p, with_wo=False)
    npt.assert_allclose(out_ab.data, expected, rtol=0, atol=1e-12)
    npt.assert_allclose(out_ba.data, expected, rtol=0, atol=1e-12)


def test_cma_zero_sequences_zero_outputs():
    config = make_config()
    rng = np.random.default_rng(20)
    p = make_params(rng, 8, 2, with_wo=False)
    z = Tensor(np.zeros((config.n_tokens, 8)))
    out_ab, out_ba = cross_attention(z, z, p, config)
    npt.assert_array_equal(out_ab.data, np.zeros((config.n_tokens, 8)))
    npt.assert_array_equal(out_ba.data, np.zeros((config.n_tokens, 8)))


def test_cma_matches_direct_formula():
    rng = np.random.default_rng(21)
    config = make_config()
    p = make_params(rng, 8, 2, with_wo=False)
    za = rng.standard_normal((config.n_tokens, 8))
    zb = rng.standard_normal((config.n_tokens, 8))
    out_ab, out_ba = cross_attention(Tensor(za), Tensor(zb), p, config)

    def direction(zq, zkv):
        heads = []
        for h in range(2):
            q = zq @ p.wq[h].data
            k = zkv @ p.wk[h].data
            v = zkv @ p.wv[h].data
            heads.append(np_softmax(q @ k.T / 2.0) @ v)
        return np.concatenate(heads, axis=-1)

    npt.assert_allclose(out_ab.data, direction(za, zb), rtol=0, atol=1e-12)
    npt.assert_allclose(out_ba.data, direction(zb, za), rtol=0, atol=1e-12)


def test_cma_shape_mismatch_rejected():
    rng = np.random.default_rng(22)
    config = make_config()
    p = make_params(rng, 8, 2, with_wo=False)
    with pytest.raises(ShapeError):
        cross_attention(
            Tensor(np.zeros((4, 8))), Tensor(np.zeros((5, 8))), p, config
        )


def test_cma_sharing_is_by_reference():
    # mutate the shared query projection: output changes; revert: identical
    rng = np.random.default_rng(23)
    config = make_config()
    p = make_params(rng, 8, 2, with_wo=False)
    za = rng.standard_normal((config.n_tokens, 8))
    zb = rng.standard_normal((config.n_tokens, 8))
    base, _ = cross_attention(Tensor(za), Tensor(zb), p, config)
    original = p.wq[0].data.copy()
    p.wq[0].data += 0.5
    bumped, _ = cross_attention(Tensor(za), Tensor(zb), p, config)
    assert not np.array_equal(bumped.data, base.data)
    p.wq[0].data[...] = original
    reverted, _ = cross_attention(Tensor(za), Tensor(zb), p, config)
    npt.assert_array_equal(reverted.data, base.data)


# ---------------------------------------------------------------------------
# grids


def test_mask_to_grids_square():
    mask = np.arange(32).reshape(2, 1, 16) % 2
    grids = mask_to_grids(mask.astype(np.uint8))
    assert grids.shape == (2, 4, 4)
    npt.assert_array_equal(grids.reshape(2, 16), mask.reshape(2, 16))


def test_mask_to_grids_rejects_non_square():
    with pytest.raises(ShapeError):
        mask_to_grids(np.zeros((1, 1, 15), dtype=np.uint8))
