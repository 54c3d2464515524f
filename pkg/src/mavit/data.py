"""Seeded synthetic multi-spectral liveness data, plus on-disk ingestion.

Each sample is a pair of co-registered images (color stream plus a
single-channel depth-like stream). Bonafide samples carry a smooth local
texture cue at one patch-aligned location, consistent across modalities;
attack samples carry a high-contrast checkerboard anomaly at their cue
patch, also in both modalities. Every sample additionally gets a
modality-specific stripe pattern (horizontal in one spectrum, vertical
in the other) regardless of class, so modality is easy to read off but
useless for liveness. With cue_strength 0 the two classes are drawn from
the same distribution and the task collapses to chance.

On disk a dataset is one JSON manifest plus one raw tensor file per
(sample, modality): an 8-byte magic, a little-endian uint32 rank and
dims, then float32 payload. Writing is bit-reproducible for a fixed
seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModalityId, default_modalities
from .errors import ConfigError, ManifestError

TENSOR_MAGIC = b"MAVTNS01"
MANIFEST_VERSION = 1


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_tensor_header(path) -> tuple[int, ...]:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:8] != TENSOR_MAGIC:
            raise ManifestError(f"{path}: not a tensor file (bad magic)")
        (ndim,) = struct.unpack("<I", head[8:12])
        dims = f.read(4 * ndim)
        if len(dims) != 4 * ndim:
            raise ManifestError(f"{path}: truncated header")
        return struct.unpack(f"<{ndim}I", dims)


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != TENSOR_MAGIC:
        raise ManifestError(f"{path}: not a tensor file (bad magic)")
    (ndim,) = struct.unpack("<I", raw[8:12])
    shape = struct.unpack(f"<{ndim}I", raw[12 : 12 + 4 * ndim])
    payload = raw[12 + 4 * ndim :]
    expected = 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise ManifestError(
            f"{path}: payload is {len(payload)} bytes, shape {shape} needs {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs. ``cue_strength`` must be positive for a learnable
    task; 0 produces two identical class distributions (chance level)."""

    train_samples: int = 256
    dev_samples: int = 64
    test_samples: int = 64
    image_size: int = 32
    patch_size: int = 8
    live_fraction: float = 0.5
    cue_strength: float = 1.0
    nuisance_strength: float = 0.3
    seed: int = 7

    def __post_init__(self):
        if min(self.train_samples, self.dev_samples, self.test_samples) < 0:
            raise ConfigError("sample counts must be non-negative")
        if not 0.0 < self.live_fraction < 1.0:
            raise ConfigError("live_fraction must lie strictly between 0 and 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.cue_strength < 0 or self.nuisance_strength < 0:
            raise ConfigError("strengths must be non-negative")

    def to_dict(self) -> dict:
        return {
            "train_samples": self.train_samples,
            "dev_samples": self.dev_samples,
            "test_samples": self.test_samples,
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "live_fraction": self.live_fraction,
            "cue_strength": self.cue_strength,
            "nuisance_strength": self.nuisance_strength,
            "seed": self.seed,
        }


@dataclass
class SampleRecord:
    sample_id: str
    split: str
    y_cls: int
    cue_patch: tuple[int, int] | None
    images: dict[str, np.ndarray] | None = None  # eager payloads
    files: dict[str, Path] = field(default_factory=dict)
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)


class Dataset:
    """Sample collection with per-modality read accounting.

    Images load lazily from disk (or sit in memory straight from the
    generator); every access through ``image`` counts against its
    modality, which is how the flexible-modal isolation guarantee is
    checked.
    """

    def __init__(self, modalities: tuple[ModalityId, ...], samples: list[SampleRecord],
                 generator: SynthConfig | None = None, root: Path | None = None):
        self.modalities = modalities
        self.samples = samples
        self.generator = generator
        self.root = root
        self.read_counts: dict[str, int] = {m.tag: 0 for m in modalities}
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]

    def tags(self) -> list[str]:
        return [m.tag for m in self.modalities]

    def image(self, record: SampleRecord, tag: str) -> np.ndarray:
        if tag not in self.read_counts:
            raise ManifestError(f"unknown modality {tag!r} for this dataset")
        self.read_counts[tag] += 1
        if record.images is not None and tag in record.images:
            return record.images[tag]
        key = (record.sample_id, tag)
        if key not in self._cache:
            if tag not in record.files:
                raise ManifestError(
                    f"sample {record.sample_id}: modality {tag!r} was not loaded"
                )
            arr = read_tensor(record.files[tag])
            if tuple(arr.shape) != tuple(record.shapes[tag]):
                raise ManifestError(
                    f"sample {record.sample_id}: tensor shape {arr.shape} does not "
                    f"match manifest {record.shapes[tag]}"
                )
            self._cache[key] = arr
        return self._cache[key]


# ---------------------------------------------------------------------------
# generation


def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 4) -> np.ndarray:
    """Bilinear upsample of a coarse uniform grid: smooth, low-frequency."""
    grid = rng.uniform(-1.0, 1.0, size=(coarse + 1, coarse + 1))
    ax = np.linspace(0.0, coarse, size)
    i0 = np.clip(ax.astype(np.int64), 0, coarse - 1)
    frac = ax - i0
    top = grid[i0][:, i0] * (1 - frac)[None, :] + grid[i0][:, i0 + 1] * frac[None, :]
    bot = grid[i0 + 1][:, i0] * (1 - frac)[None, :] + grid[i0 + 1][:, i0 + 1] * frac[None, :]
    return top * (1 - frac)[:, None] + bot * frac[:, None]


def _stripes(size: int, orientation: int, phase: float, freq: float) -> np.ndarray:
    coord = np.arange(size) / size
    wave = np.sin(2.0 * np.pi * (freq * coord + phase))
    if orientation % 2 == 0:
        return np.tile(wave[None, :], (size, 1))  # vertical bands
    return np.tile(wave[:, None], (1, size))  # horizontal bands


def _cue_bump(p: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1, 1, p), np.linspace(-1, 1, p), indexing="ij")
    return np.exp(-2.5 * (xx**2 + yy**2))


def _cue_checker(p: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    return ((xx + yy) % 2) * 2.0 - 1.0


def _render_sample(
    rng: np.random.Generator,
    config: SynthConfig,
    modality: ModalityId,
    y_cls: int,
    cue: tuple[int, int],
) -> np.ndarray:
    size = config.image_size
    p = config.patch_size
    base = 0.45 + 0.18 * _smooth_field(rng, size)
    stripe = _stripes(
        size,
        orientation=modality.spectrum_index,
        phase=rng.uniform(0.0, 1.0),
        freq=rng.uniform(2.0, 3.0),
    )
    img = base + config.nuisance_strength * 0.4 * stripe
    r0, c0 = cue[0] * p, cue[1] * p
    patch = _cue_bump(p) if y_cls == 1 else _cue_checker(p)
    img[r0 : r0 + p, c0 : c0 + p] += config.cue_strength * 0.5 * patch
    img = np.clip(img, 0.0, 1.0)
    if modality.channels == 1:
        return img[None].astype(np.float32)
    tint = 1.0 + 0.08 * rng.uniform(-1.0, 1.0, size=(3, 1, 1))
    return np.clip(img[None] * tint, 0.0, 1.0).astype(np.float32)


def generate(
    config: SynthConfig, modalities: tuple[ModalityId, ...] | None = None
) -> Dataset:
    """Build all three splits in memory from per-split child seeds."""
    modalities = default_modalities() if modalities is None else modalities
    grid = config.image_size // config.patch_size
    samples: list[SampleRecord] = []
    for split_idx, (split, count) in enumerate(
        [("train", config.train_samples), ("dev", config.dev_samples),
         ("test", config.test_samples)]
    ):
        rng = np.random.default_rng([config.seed, split_idx])
        live = int(round(count * config.live_fraction))
        labels = np.array([1] * live + [0] * (count - live), dtype=np.int64)
        rng.shuffle(labels)
        for i in range(count):
            cue = (int(rng.integers(grid)), int(rng.integers(grid)))
            images = {
                m.tag: _render_sample(rng, config, m, int(labels[i]), cue)
                for m in modalities
            }
            samples.append(
                SampleRecord(
                    sample_id=f"{split}-{i:04d}",
                    split=split,
                    y_cls=int(labels[i]),
                    cue_patch=cue,
                    images=images,
                    shapes={t: tuple(a.shape) for t, a in images.items()},
                )
            )
    return Dataset(modalities, samples, generator=config)


# ---------------------------------------------------------------------------
# export / load


def export_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest.json plus one tensor file per (sample, modality)."""
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in dataset.samples:
        files = {}
        for m in dataset.modalities:
            rel = f"tensors/{rec.sample_id}_{m.tag}.bin"
            img = rec.images[m.tag] if rec.images else read_tensor(rec.files[m.tag])
            write_tensor(out_dir / rel, img)
            files[m.tag] = rel
        entries.append(
            {
                "id": rec.sample_id,
                "split": rec.split,
                "y_cls": rec.y_cls,
                "cue_patch": list(rec.cue_patch) if rec.cue_patch else None,
                "files": files,
                "shapes": {t: list(s) for t, s in rec.shapes.items()},
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "modalities": [
            {"tag": m.tag, "spectrum_index": m.spectrum_index, "channels": m.channels}
            for m in dataset.modalities
        ],
        "generator": dataset.generator.to_dict() if dataset.generator else None,
        "samples": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path, modalities: list[str] | None = None) -> Dataset:
    """Read a manifest and validate the referenced tensors.

    ``modalities`` restricts loading (and validation) to a subset of tags;
    files of other modalities are never opened, which is what makes
    single-modal evaluation provably independent of the absent streams.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{manifest_path}: cannot parse manifest: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(
            f"{manifest_path}: unsupported manifest version {manifest.get('version')}"
        )
    declared = {
        m["tag"]: ModalityId(m["tag"], m["spectrum_index"], m.get("channels", 3))
        for m in manifest["modalities"]
    }
    if modalities is None:
        wanted = list(declared)
    else:
        unknown = [t for t in modalities if t not in declared]
        if unknown:
            raise ManifestError(
                f"{manifest_path}: modalities {unknown} not listed in manifest"
            )
        wanted = list(modalities)
    root = manifest_path.parent
    problems: list[str] = []
    samples: list[SampleRecord] = []
    gen = manifest.get("generator")
    for entry in manifest["samples"]:
        files: dict[str, Path] = {}
        shapes: dict[str, tuple[int, ...]] = {}
        for tag in entry["files"]:
            if tag not in declared:
                problems.append(f"sample {entry['id']}: unlisted modality {tag!r}")
        for tag in wanted:
            if tag not in entry["files"]:
                problems.append(f"sample {entry['id']}: missing modality {tag!r}")
                continue
            path = root / entry["files"][tag]
            declared_shape = tuple(entry["shapes"][tag])
            if not path.exists():
                problems.append(f"sample {entry['id']}: missing file {path}")
                continue
            try:
                actual = read_tensor_header(path)
            except ManifestError as exc:
                problems.append(str(exc))
                continue
            if actual != declared_shape:
                problems.append(
                    f"sample {entry['id']}: header shape {actual} != manifest {declared_shape}"
                )
                continue
            files[tag] = path
            shapes[tag] = declared_shape
        cue = entry.get("cue_patch")
        samples.append(
            SampleRecord(
                sample_id=entry["id"],
                split=entry["split"],
                y_cls=int(entry["y_cls"]),
                cue_patch=tuple(cue) if cue else None,
                images=None,
                files=files,
                shapes=shapes,
            )
        )
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        problems.append("duplicate sample ids in manifest")
    if problems:
        raise ManifestError(
            f"{manifest_path}: {len(problems)} problem(s):\n  " + "\n  ".join(problems)
        )
    mods = tuple(declared[t] for t in wanted)
    return Dataset(mods, samples, generator=SynthConfig(**gen) if gen else None, root=root)
