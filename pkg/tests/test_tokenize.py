import numpy as np
import numpy.testing as npt
import pytest

from mavit.config import ModalityId, ModelConfig
from mavit.errors import ConfigError
from mavit.store import ParamStore
from mavit.tensor import Tensor, matmul
from mavit.tokenize import embed, init_params, patchify, replicate_channels


@pytest.fixture
def small_config():
    return ModelConfig(image_size=8, patch_size=4, embed_dim=8, heads=2, blocks=1)


def make_store(config, seed=0):
    store = ParamStore()
    init_params(store, config, np.random.default_rng(seed))
    return store


def test_patchify_counts():
    img = np.zeros((3, 8, 8))
    assert patchify(img, 4).shape == (4, 48)


def test_patchify_backbone_geometry():
    # 224px input with 16px patches: 196 patches, 198 tokens
    img = np.zeros((3, 224, 224))
    assert patchify(img, 16).shape == (196, 768)
    config = ModelConfig(image_size=224, patch_size=16, embed_dim=32, heads=4, blocks=1)
    assert config.n_patches == 196
    assert config.n_tokens == 198


def test_patchify_constant_image_rows_identical():
    img = np.full((3, 8, 8), 0.25)
    rows = patchify(img, 4)
    for r in range(1, rows.shape[0]):
        npt.assert_array_equal(rows[r], rows[0])


def test_patchify_raster_and_channel_major_order():
    c, h, p = 2, 4, 2
    img = np.arange(c * h * h, dtype=np.float64).reshape(c, h, h)
    rows = patchify(img, p)
    # patch (0, 1) covers columns 2..3 of rows 0..1, channel-major flattening
    expected = np.concatenate([img[0, 0:2, 2:4].ravel(), img[1, 0:2, 2:4].ravel()])
    npt.assert_array_equal(rows[1], expected)


def test_patchify_indivisible_size_rejected():
    with pytest.raises(ConfigError):
        patchify(np.zeros((3, 9, 9)), 4)


def test_replicate_channels():
    one = np.ones((1, 4, 4))
    npt.assert_array_equal(replicate_channels(one), np.ones((3, 4, 4)))
    three = np.zeros((3, 4, 4))
    assert replicate_channels(three) is three


def test_embed_shape_and_order(small_config):
    store = make_store(small_config)
    rng = np.random.default_rng(1)
    seq = embed(rng.uniform(0, 1, (3, 8, 8)), small_config.modalities[0], store, small_config)
    assert seq.tokens.shape == (small_config.n_tokens, small_config.embed_dim)


def test_embed_zero_everything_gives_zero_sequence(small_config):
    store = make_store(small_config)
    for name in ("tok.cls", "tok.mod", "tok.pos", "tok.spe.0", "tok.spe.1"):
        store[name].data[...] = 0.0
    seq = embed(np.zeros((3, 8, 8)), small_config.modalities[0], store, small_config)
    npt.assert_array_equal(seq.tokens.data, np.zeros(seq.tokens.shape))


def test_embed_patch_rows_match_reprojection_oracle(small_config):
    store = make_store(small_config)
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (3, 8, 8))
    mod = small_config.modalities[0]
    seq = embed(img, mod, store, small_config)
    # recompute rows 2..N-1 directly: projection plus the two offset tables
    patches = patchify(img, 4)
    projected = matmul(Tensor(patches), store["tok.patch"]).data
    offsets = store["tok.pos"].data + store["tok.spe.0"].data
    npt.assert_array_equal(seq.tokens.data[2:], projected + offsets[2:])
    npt.assert_array_equal(seq.tokens.data[0], store["tok.cls"].data[0] + offsets[0])
    npt.assert_array_equal(seq.tokens.data[1], store["tok.mod"].data[0] + offsets[1])


def test_embed_modality_swap_changes_only_spectrum_offset(small_config):
    store = make_store(small_config)
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (3, 8, 8))
    seq_r = embed(img, small_config.modalities[0], store, small_config)
    seq_d = embed(img, small_config.modalities[1], store, small_config)
    diff = seq_r.tokens.data - seq_d.tokens.data
    expected = store["tok.spe.0"].data - store["tok.spe.1"].data
    npt.assert_allclose(diff, expected, rtol=0, atol=1e-12)
    # offset is the only difference: equal spectra give bit-identical output
    store["tok.spe.1"].data[...] = store["tok.spe.0"].data
    seq_d2 = embed(img, small_config.modalities[1], store, small_config)
    npt.assert_array_equal(seq_r.tokens.data, seq_d2.tokens.data)


def test_position_rows_shared_across_modalities(small_config):
    store = make_store(small_config)
    # one storage slot serves every modality, bit-identical by construction
    assert store["tok.pos"] is store["tok.pos"]
    assert store["tok.spe.0"] is not store["tok.spe.1"]


def test_embed_batched_matches_single(small_config):
    store = make_store(small_config)
    rng = np.random.default_rng(4)
    imgs = rng.uniform(0, 1, (3, 3, 8, 8))
    mod = small_config.modalities[0]
    batched = embed(imgs, mod, store, small_config)
    assert batched.tokens.shape == (3, small_config.n_tokens, small_config.embed_dim)
    for i in range(3):
        single = embed(imgs[i], mod, store, small_config)
        npt.assert_array_equal(batched.tokens.data[i], single.tokens.data)


def test_embed_single_channel_replicates(small_config):
    store = make_store(small_config)
    rng = np.random.default_rng(5)
    one = rng.uniform(0, 1, (1, 8, 8))
    mod = small_config.modalities[1]
    a = embed(one, mod, store, small_config)
    b = embed(np.repeat(one, 3, axis=0), mod, store, small_config)
    npt.assert_array_equal(a.tokens.data, b.tokens.data)


def test_embed_unknown_modality_rejected(small_config):
    store = make_store(small_config)
    with pytest.raises(ConfigError):
        embed(np.zeros((3, 8, 8)), ModalityId("I", 9), store, small_config)


def test_embed_wrong_image_size_rejected(small_config):
    store = make_store(small_config)
    with pytest.raises(ConfigError):
        embed(np.zeros((3, 16, 16)), small_config.modalities[0], store, small_config)
