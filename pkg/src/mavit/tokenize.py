"""Image tokenization: patches, agent tokens, position and spectrum offsets.

Every modal image becomes a sequence of N = n+2 embedding rows: row 0 is
the class (liveness) agent, row 1 the modality agent, rows 2..N-1 the
linearly projected patches. Position embeddings are one shared table
(the sensors are co-registered), spectrum embeddings are one table per
modality; both cover all N rows, agents included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModalityId, ModelConfig
from .errors import ConfigError, ShapeError
from .store import ParamStore
from .tensor import Tensor, add, concat, matmul


@dataclass
class TokenSequence:
    """Encoder state for one stream; ``modality`` is None for the fused one."""

    modality: ModalityId | None
    tokens: Tensor  # (..., N, D), or (..., 2N, D) for the fused sequence


def replicate_channels(image: np.ndarray) -> np.ndarray:
    """Repeat single-channel input to 3 channels so one patch projection
    serves every modality."""
    if image.shape[-3] == 3:
        return image
    if image.shape[-3] == 1:
        return np.repeat(image, 3, axis=-3)
    raise ShapeError(f"expected 1 or 3 channels, got shape {image.shape}")


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``(..., C, H, W)`` into ``(..., n, C*patch_size**2)`` rows.

    Patches are emitted in row-major raster order; each patch flattens
    channel-major (all of channel 0, then channel 1, ...).
    """
    *lead, c, h, w = image.shape
    if h != w:
        raise ConfigError(f"images must be square, got {h}x{w}")
    if h % patch_size != 0:
        raise ConfigError(f"image size {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    x = image.reshape(*lead, c, g, patch_size, g, patch_size)
    # (..., C, gh, p, gw, p) -> (..., gh, gw, C, p, p)
    x = np.moveaxis(x, (-5, -4, -3, -2, -1), (-3, -5, -2, -4, -1))
    return np.ascontiguousarray(
        x.reshape(*lead, g * g, c * patch_size * patch_size), dtype=np.float64
    )


def init_params(store: ParamStore, config: ModelConfig, rng: np.random.Generator) -> None:
    """Create the tokenization parameters under the ``tok.`` prefix."""
    d = config.embed_dim
    s = 1.0 / np.sqrt(d)

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    store.create("tok.cls", u(1, d))
    store.create("tok.mod", u(1, d))
    store.create("tok.patch", u(config.patch_dim, d))
    store.create("tok.pos", u(config.n_tokens, d))
    for m in config.modalities:
        store.create(f"tok.spe.{m.spectrum_index}", u(config.n_tokens, d))


def _expand_rows(row: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Broadcast a (1, D) learnable row to leading batch dims via add-zero,
    so the gradient folds back onto the single stored row."""
    if not lead:
        return row
    zeros = Tensor(np.zeros(lead + row.shape))
    return add(zeros, row)


def extract_patches(image: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Channel replication plus patch splitting; parameter-independent."""
    image = replicate_channels(np.asarray(image, dtype=np.float64))
    if image.shape[-1] != config.image_size:
        raise ConfigError(
            f"expected {config.image_size}x{config.image_size} images, got {image.shape}"
        )
    return patchify(image, config.patch_size)


def embed_patches(
    patches: np.ndarray,
    modality: ModalityId,
    store: ParamStore,
    config: ModelConfig,
) -> TokenSequence:
    """Token sequence from pre-split patch rows (see ``embed``)."""
    if not any(m.spectrum_index == modality.spectrum_index for m in config.modalities):
        raise ConfigError(f"modality {modality.tag!r} not registered in this config")
    patches = Tensor(patches)
    lead = patches.shape[:-2]
    projected = matmul(patches, store["tok.patch"])
    rows = concat(
        [
            _expand_rows(store["tok.cls"], lead),
            _expand_rows(store["tok.mod"], lead),
            projected,
        ],
        axis=-2,
    )
    offsets = add(store["tok.pos"], store[f"tok.spe.{modality.spectrum_index}"])
    return TokenSequence(modality=modality, tokens=add(rows, offsets))


def embed(
    image: np.ndarray,
    modality: ModalityId,
    store: ParamStore,
    config: ModelConfig,
) -> TokenSequence:
    """Tokenize one modal image (or a stack of them) into (..., N, D).

    tokens = [cls || mod || patches @ W] + (pos + spectrum[modality]),
    with the position table shared across modalities and the spectrum
    table selected by the modality's spectrum index.
    """
    return embed_patches(extract_patches(image, config), modality, store, config)
