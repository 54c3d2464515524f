"""End-to-end model: construction, training, flexible-modal inference,
parameter/MAC accounting, and bit-exact checkpointing.

One trained instance serves every test scenario: score a single modality
by activating only that modality's input interface (its spectrum
embedding; the position table is shared), or score a pair to get both
single-modal paths plus the fused cross-modal path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CROSS_TAG, ModelConfig
from .encoder import EncoderState, encode, init_block_params
from .errors import ConfigError, ContractError, ManifestError, NumericError
from .heads import LabeledPair, init_head_params, liveness_logit, total_loss
from .store import ParamStore
from .tensor import Tensor, backward, no_grad, _sigmoid_data
from .tokenize import TokenSequence, embed, init_params as init_token_params

_CKPT_MAGIC = b"MAVTCKP1"


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam over the canonical parameter slots, fixed iteration order."""

    def __init__(self, store: ParamStore, config: OptimizerConfig):
        self.store = store
        self.config = config
        self.t = 0
        self._m = {n: np.zeros(p.shape) for n, p in store.items()}
        self._v = {n: np.zeros(p.shape) for n, p in store.items()}

    def step(self) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m = self._m[name]
            v = self._v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass
class TrainResult:
    loss_trace: list[float] = field(default_factory=list)
    steps: int = 0


class TrainAbort(NumericError):
    """Training hit a non-finite loss; parameters were rolled back to the
    last finite step."""

    def __init__(self, step: int, result: TrainResult):
        super().__init__(f"non-finite loss at step {step}; rolled back to last good state")
        self.step = step
        self.result = result


class MAViT:
    """Single-branch multi-modal transformer for liveness classification."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.step_count = 0
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        init_token_params(self.store, config, rng)
        for k in range(config.blocks):
            init_block_params(self.store, config, k, rng)
        init_head_params(self.store, config, rng)

    # ------------------------------------------------------------------
    # forward paths

    def tokenize(self, images: dict[str, np.ndarray]) -> dict[str, TokenSequence]:
        return {
            tag: embed(img, self.config.modality(tag), self.store, self.config)
            for tag, img in images.items()
        }

    def encode_images(
        self,
        images: dict[str, np.ndarray],
        record_masks: bool = False,
    ) -> EncoderState:
        return encode(
            self.tokenize(images), self.store, self.config, record_masks=record_masks
        )

    def loss_on_batch(self, images: dict[str, np.ndarray], y_cls: np.ndarray):
        """Joint loss over a stacked batch; targets broadcast to the logit
        shape (B, 1, 1) so each sample contributes its own term."""
        y = np.asarray(y_cls, dtype=np.float64).reshape(-1, 1, 1)
        state = self.encode_images(images)
        return total_loss(state, y, self.store, self.config)

    def patch_loss_closure(self, images: dict[str, np.ndarray], y_cls: np.ndarray):
        """Deterministic loss closure over the parameters for gradient
        checking: patch extraction (parameter-independent) happens once,
        everything downstream re-runs per call."""
        from .tokenize import embed_patches, extract_patches

        patches = {
            tag: extract_patches(img, self.config) for tag, img in images.items()
        }
        y = np.asarray(y_cls, dtype=np.float64).reshape(-1, 1, 1)

        def loss_fn() -> Tensor:
            seqs = {
                tag: embed_patches(p, self.config.modality(tag), self.store, self.config)
                for tag, p in patches.items()
            }
            state = encode(seqs, self.store, self.config)
            loss, _ = total_loss(state, y, self.store, self.config)
            return loss

        return loss_fn

    def forward_train(self, pair: LabeledPair):
        """Loss and per-term breakdown for one fully paired sample."""
        missing = [m.tag for m in self.config.modalities if m.tag not in pair.images]
        if missing:
            raise ContractError(
                f"training requires paired data; missing modalities: {missing}"
            )
        state = self.encode_images(pair.images)
        loss, terms = total_loss(state, float(pair.y_cls), self.store, self.config)
        return loss, {name: t.item() for name, t in terms.items()}

    def infer(self, images: dict[str, np.ndarray], tags=None) -> dict[str, float]:
        """Scores in (0, 1) for each requested path.

        One modality gives that modality's score; two give both
        single-modal scores plus the fused '{CROSS_TAG}' score. Only the
        requested modalities' inputs are touched, and no parameter is
        written.
        """
        scores = self.infer_batch(
            {t: np.asarray(img)[None] for t, img in (images or {}).items()}, tags
        )
        return {path: float(s[0]) for path, s in scores.items()}

    def infer_batch(self, images: dict[str, np.ndarray], tags=None) -> dict[str, np.ndarray]:
        tags = list(images) if tags is None else list(tags)
        if not tags:
            raise ContractError("inference needs at least one modality")
        for t in tags:
            self.config.modality(t)  # raises on unknown tags
            if t not in images:
                raise ContractError(f"no image supplied for modality {t!r}")
        with no_grad():
            state = self.encode_images({t: images[t] for t in tags})
            out: dict[str, np.ndarray] = {}
            for t in tags:
                logit = liveness_logit(state.sequences[t], self.store)
                out[t] = _sigmoid_data(logit.data).reshape(-1)
            if state.cross is not None:
                logit = liveness_logit(state.cross, self.store)
                out[CROSS_TAG] = _sigmoid_data(logit.data).reshape(-1)
        return out

    # ------------------------------------------------------------------
    # training

    def train(
        self,
        dataset,
        split: str = "train",
        epochs: int | None = None,
        max_steps: int | None = None,
        batch_size: int = 8,
        optimizer: OptimizerConfig = OptimizerConfig(),
        seed: int = 0,
    ) -> TrainResult:
        """Adam over seeded shuffled batches; one trace entry per step.

        A non-finite loss rolls parameters back to the previous step and
        raises TrainAbort carrying the partial trace.
        """
        records = dataset.split(split)
        if not records:
            raise ContractError(f"dataset split {split!r} is empty")
        if epochs is None and max_steps is None:
            raise ConfigError("training needs epochs or max_steps")
        tags = [m.tag for m in self.config.modalities]
        opt = Adam(self.store, optimizer)
        rng = np.random.default_rng(seed)
        result = TrainResult()
        # parameters that most recently produced a finite loss
        last_good = self.store.snapshot()
        epoch = 0
        while True:
            if epochs is not None and epoch >= epochs:
                break
            if max_steps is not None and result.steps >= max_steps:
                break
            order = rng.permutation(len(records))
            for lo in range(0, len(order), batch_size):
                if max_steps is not None and result.steps >= max_steps:
                    break
                batch = [records[i] for i in order[lo : lo + batch_size]]
                images = {
                    t: np.stack([dataset.image(r, t) for r in batch]) for t in tags
                }
                y = np.array([r.y_cls for r in batch], dtype=np.float64)
                self.store.zero_grad()
                loss, _ = self.loss_on_batch(images, y)
                value = loss.item()
                if not np.isfinite(value):
                    self.store.restore(last_good)
                    raise TrainAbort(result.steps, result)
                last_good = self.store.snapshot()
                backward(loss)
                opt.step()
                result.steps += 1
                self.step_count += 1
                result.loss_trace.append(value)
            epoch += 1
        return result

    def score_records(self, dataset, records, tags) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Batched scores per path for a list of sample records."""
        tags = list(tags)
        images = {t: np.stack([dataset.image(r, t) for r in records]) for t in tags}
        labels = np.array([r.y_cls for r in records], dtype=np.int64)
        scores = self.infer_batch(images, tags)
        return {path: (s, labels) for path, s in scores.items()}

    def accuracy(self, dataset, records, tags, threshold: float = 0.5) -> dict[str, float]:
        out = {}
        for path, (scores, labels) in self.score_records(dataset, records, tags).items():
            out[path] = float(np.mean((scores >= threshold).astype(np.int64) == labels))
        return out

    # ------------------------------------------------------------------
    # accounting

    def count_params(self) -> int:
        """Scalar parameter count with shared slots deduplicated."""
        return self.store.count()

    def count_flops(self) -> int:
        return count_flops(self.config)

    # ------------------------------------------------------------------
    # serialization

    def save(self, path) -> None:
        path = Path(path)
        names = self.store.names()
        meta = {
            "format": 1,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "step_count": self.step_count,
            "params": [[n, list(self.store[n].shape)] for n in names],
            "aliases": self.store.alias_table(),
        }
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for n in names:
                f.write(self.store[n].data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "MAViT":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:8] != _CKPT_MAGIC:
            raise ManifestError(f"{path}: not a checkpoint (bad magic)")
        (blob_len,) = struct.unpack("<I", raw[8:12])
        meta = json.loads(raw[12 : 12 + blob_len].decode("utf-8"))
        if meta.get("format") != 1:
            raise ManifestError(f"{path}: unsupported checkpoint format {meta.get('format')}")
        model = cls(ModelConfig.from_dict(meta["config"]), seed=meta["seed"])
        model.step_count = meta["step_count"]
        offset = 12 + blob_len
        for name, shape in meta["params"]:
            if name not in model.store:
                raise ManifestError(f"{path}: unexpected parameter {name!r}")
            n_bytes = 8 * int(np.prod(shape)) if shape else 8
            chunk = raw[offset : offset + n_bytes]
            if len(chunk) != n_bytes:
                raise ManifestError(f"{path}: truncated payload at {name!r}")
            model.store[name].data[...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
            offset += n_bytes
        if offset != len(raw):
            raise ManifestError(f"{path}: {len(raw) - offset} trailing bytes")
        return model


def count_flops(config: ModelConfig) -> int:
    """Multiply-accumulate count of one paired two-modality forward pass.

    Counts matrix-product MACs only (the elementwise and normalization
    work is linear in tokens and negligible against the products).
    """
    d = config.embed_dim
    n = config.n_patches
    n_tok = config.n_tokens
    hidden = config.mlp_hidden
    macs = 2 * n * config.patch_dim * d
    per_block = 0
    stb = 3 * n_tok * d * d + 2 * n_tok * n_tok * d + n_tok * d * d + 2 * n_tok * d * hidden
    per_block += 2 * stb
    if config.use_mda:
        mda = 2 * d * d + 3 * n * d * d + 3 * n * d + d * d
        per_block += 2 * mda
    if config.use_cma:
        per_block += 6 * n_tok * d * d + 4 * n_tok * n_tok * d + 4 * n_tok * d * hidden
    macs += config.blocks * per_block
    # head logits: liveness per modality, two cross rows, modality per modality
    macs += 6 * d
    return macs
