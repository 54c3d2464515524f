"""Model geometry and modality registry."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

CROSS_TAG = "cross"
"""Tag used for the fused sequence built from both modal streams."""


@dataclass(frozen=True)
class ModalityId:
    """One sensing spectrum: a short tag plus its spectrum-embedding slot."""

    tag: str
    spectrum_index: int
    channels: int = 3

    def __post_init__(self):
        if self.spectrum_index < 0:
            raise ConfigError(f"spectrum_index must be >= 0, got {self.spectrum_index}")
        if self.channels not in (1, 3):
            raise ConfigError(f"modality channels must be 1 or 3, got {self.channels}")


def default_modalities() -> tuple[ModalityId, ...]:
    # color stream plus a single-channel depth-like stream
    return (ModalityId("R", 0, channels=3), ModalityId("D", 1, channels=1))


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and switches for one model instance.

    ``mask_mass`` is the cumulative relevance mass that the disentangling
    attention marks as modality-related and discards. ``use_mda`` and
    ``use_cma`` gate the two halves of the modality-agnostic block, giving
    the plain-ViT / disentangle-only / cross-only ablations.
    """

    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 4
    blocks: int = 4
    mlp_ratio: float = 4.0
    mask_mass: float = 0.8
    modalities: tuple[ModalityId, ...] = field(default_factory=default_modalities)
    use_mda: bool = True
    use_cma: bool = True

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if not 0.0 <= self.mask_mass <= 1.0:
            raise ConfigError(f"mask_mass must lie in [0, 1], got {self.mask_mass}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        tags = [m.tag for m in self.modalities]
        idxs = [m.spectrum_index for m in self.modalities]
        if len(set(tags)) != len(tags) or len(set(idxs)) != len(idxs):
            raise ConfigError("modality tags and spectrum indices must be unique")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        # class token + modality token + patches
        return self.n_patches + 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        # patches are projected from 3 channels; single-channel modalities
        # are replicated before projection so one weight serves all
        return 3 * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        hidden = int(round(self.mlp_ratio * self.embed_dim))
        if hidden <= 0:
            raise ConfigError("mlp_ratio too small for this embed_dim")
        return hidden

    def modality(self, tag: str) -> ModalityId:
        for m in self.modalities:
            if m.tag == tag:
                return m
        raise ConfigError(f"unknown modality {tag!r}; registered: "
                          f"{[m.tag for m in self.modalities]}")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "blocks": self.blocks,
            "mlp_ratio": self.mlp_ratio,
            "mask_mass": self.mask_mass,
            "modalities": [
                {"tag": m.tag, "spectrum_index": m.spectrum_index, "channels": m.channels}
                for m in self.modalities
            ],
            "use_mda": self.use_mda,
            "use_cma": self.use_cma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        mods = tuple(
            ModalityId(m["tag"], m["spectrum_index"], m.get("channels", 3))
            for m in d["modalities"]
        )
        return cls(
            image_size=d["image_size"],
            patch_size=d["patch_size"],
            embed_dim=d["embed_dim"],
            heads=d["heads"],
            blocks=d["blocks"],
            mlp_ratio=d["mlp_ratio"],
            mask_mass=d["mask_mass"],
            modalities=mods,
            use_mda=d.get("use_mda", True),
            use_cma=d.get("use_cma", True),
        )
