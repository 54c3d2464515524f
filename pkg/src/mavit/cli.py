"""Command-line front end.

    mavit gen        --out DIR [--seed N --samples N ...]
    mavit train      --data DIR --out DIR [model and optimizer flags]
    mavit eval       --ckpt FILE --data DIR --out DIR [--modalities R,D ...]
    mavit cross-eval --ckpt FILE --dev-data DIR --test-data DIR --out DIR
    mavit dump-masks --ckpt FILE --data DIR --out DIR [--sample K --layer K]
    mavit grad-check [tiny-model flags]

Flags override values from an optional JSON ``--config`` file; the seed
falls back to the MAVIT_SEED environment variable. Every command echoes
its effective configuration into the output directory, emits line
oriented ``key=value`` reports (or JSON behind ``--json-style``), and is
byte-deterministic for a fixed seed. Exit codes: 0 success, 1 check
failure, 2 usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import CROSS_TAG, ModelConfig
from .data import SynthConfig, export_dataset, generate, load_dataset
from .errors import MavitError, NumericError
from .heads import LabeledPair
from .metrics import ScoreSet, acer, apcer_bpcer, bpcer_at, eer_threshold, hter, tpr_at_fpr
from .model import MAViT, OptimizerConfig, TrainAbort
from .tensor import grad_check

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


# ---------------------------------------------------------------------------
# option plumbing


def _resolve(args, spec: dict[str, object]) -> dict:
    """Merge flag values over config-file values over defaults."""
    file_cfg = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        file_cfg = json.loads(Path(cfg_path).read_text())
    out = {}
    for name, default in spec.items():
        v = getattr(args, name, None)
        if v is None:
            v = file_cfg.get(name, default)
        out[name] = v
    if "seed" in out and out["seed"] is None:
        out["seed"] = int(os.environ.get("MAVIT_SEED", "0"))
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _report_lines(report: dict) -> list[str]:
    lines = []
    for key in sorted(report):
        val = report[key]
        if isinstance(val, dict):
            for sub in sorted(val):
                lines.append(f"{key}.{sub}={_fmt(val[sub])}")
        else:
            lines.append(f"{key}={_fmt(val)}")
    return lines


def _write_report(report: dict, out_dir: Path, json_style: bool) -> None:
    if json_style:
        text = json.dumps(report, indent=2, sort_keys=True) + "\n"
        (out_dir / "report.json").write_text(text)
    else:
        text = "\n".join(_report_lines(report)) + "\n"
        (out_dir / "report.txt").write_text(text)
    sys.stdout.write(text)


def _echo_config(command: str, opts: dict, out_dir: Path) -> None:
    payload = {"command": command}
    payload.update({k: v for k, v in opts.items() if not isinstance(v, Path)})
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _outdir(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_tags(value: str | None, model: MAViT) -> list[str]:
    trained = [m.tag for m in model.config.modalities]
    if not value:
        return trained
    tags = [t.strip() for t in str(value).split(",") if t.strip()]
    unknown = [t for t in tags if t not in trained]
    if unknown:
        raise MavitError(
            f"modalities {unknown} were not trained; checkpoint knows {trained}"
        )
    return tags


# ---------------------------------------------------------------------------
# gen


_GEN_SPEC = {
    "seed": None,
    "samples": 256,
    "dev": None,
    "test": None,
    "image_size": 32,
    "patch_size": 8,
    "live_fraction": 0.5,
    "cue_strength": 1.0,
    "nuisance_strength": 0.3,
}


def cmd_gen(args) -> int:
    opts = _resolve(args, _GEN_SPEC)
    out = _outdir(args.out)
    dev = opts["dev"] if opts["dev"] is not None else max(1, opts["samples"] // 4)
    test = opts["test"] if opts["test"] is not None else max(1, opts["samples"] // 4)
    config = SynthConfig(
        train_samples=opts["samples"],
        dev_samples=dev,
        test_samples=test,
        image_size=opts["image_size"],
        patch_size=opts["patch_size"],
        live_fraction=opts["live_fraction"],
        cue_strength=opts["cue_strength"],
        nuisance_strength=opts["nuisance_strength"],
        seed=opts["seed"],
    )
    dataset = generate(config)
    manifest = export_dataset(dataset, out)
    _echo_config("gen", opts, out)
    report = {
        "manifest": manifest.name,
        "train_samples": config.train_samples,
        "dev_samples": config.dev_samples,
        "test_samples": config.test_samples,
        "modalities": ",".join(dataset.tags()),
        "seed": config.seed,
    }
    _write_report(report, out, args.json_style)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


_TRAIN_SPEC = {
    "seed": None,
    "epochs": None,
    "max_steps": None,
    "batch_size": 8,
    "lr": 1e-4,
    "embed_dim": 32,
    "heads": 4,
    "blocks": 4,
    "mlp_ratio": 4.0,
    "mask_mass": 0.8,
    "ablate": None,
}


def _model_config_for(dataset, opts) -> ModelConfig:
    sample = dataset.samples[0]
    any_tag = dataset.tags()[0]
    image_size = sample.shapes[any_tag][-1]
    patch_size = dataset.generator.patch_size if dataset.generator else 8
    ablate = opts.get("ablate")
    use_mda = ablate not in ("mda", "matb")
    use_cma = ablate not in ("cma", "matb")
    return ModelConfig(
        image_size=image_size,
        patch_size=patch_size,
        embed_dim=opts["embed_dim"],
        heads=opts["heads"],
        blocks=opts["blocks"],
        mlp_ratio=opts["mlp_ratio"],
        mask_mass=opts["mask_mass"],
        modalities=dataset.modalities,
        use_mda=use_mda,
        use_cma=use_cma,
    )


def _write_trace(trace: list[float], path: Path) -> None:
    path.write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(trace)))


def cmd_train(args) -> int:
    opts = _resolve(args, _TRAIN_SPEC)
    out = _outdir(args.out)
    if opts["ablate"] not in (None, "matb", "mda", "cma"):
        raise MavitError(f"--ablate must be matb, mda, or cma, got {opts['ablate']!r}")
    dataset = load_dataset(args.data)
    config = _model_config_for(dataset, opts)
    model = MAViT(config, seed=opts["seed"])
    epochs, max_steps = opts["epochs"], opts["max_steps"]
    if epochs is None and max_steps is None:
        epochs = 50  # desk-scaled default schedule
    _echo_config("train", opts, out)
    ckpt_path = out / "checkpoint.mavit"
    try:
        result = model.train(
            dataset,
            epochs=epochs,
            max_steps=max_steps,
            batch_size=opts["batch_size"],
            optimizer=OptimizerConfig(lr=opts["lr"]),
            seed=opts["seed"],
        )
    except TrainAbort as abort:
        model.save(ckpt_path)
        _write_trace(abort.result.loss_trace, out / "loss_trace.txt")
        sys.stderr.write(f"mavit train: {abort}\n")
        return EXIT_NUMERIC
    model.save(ckpt_path)
    _write_trace(result.loss_trace, out / "loss_trace.txt")
    from .figures import save_loss_curve

    save_loss_curve(result.loss_trace, out / "loss_curve.png")
    accuracy = model.accuracy(dataset, dataset.split("train"), dataset.tags())
    report = {
        "checkpoint": ckpt_path.name,
        "steps": result.steps,
        "final_loss": result.loss_trace[-1] if result.loss_trace else float("nan"),
        "params": model.count_params(),
        "flops_macs": model.count_flops(),
        "train_accuracy": {path: acc for path, acc in accuracy.items()},
    }
    _write_report(report, out, args.json_style)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _path_scores(model: MAViT, dataset, split: str, tags: list[str]):
    records = dataset.split(split)
    if not records:
        raise MavitError(f"dataset split {split!r} is empty")
    return {
        path: ScoreSet(scores, labels)
        for path, (scores, labels) in model.score_records(dataset, records, tags).items()
    }


def cmd_eval(args) -> int:
    opts = _resolve(args, {"modalities": None, "threshold_policy": "eer", "bpcer_target": 0.01})
    out = _outdir(args.out)
    model = MAViT.load(args.ckpt)
    tags = _parse_tags(opts["modalities"], model)
    if opts["threshold_policy"] not in ("eer", "bpcer"):
        raise MavitError(f"unknown threshold policy {opts['threshold_policy']!r}")
    dataset = load_dataset(args.data, modalities=tags)
    dev = _path_scores(model, dataset, "dev", tags)
    test = _path_scores(model, dataset, "test", tags)
    report: dict[str, dict[str, float]] = {}
    for path in sorted(test):
        thr_eer, eer = eer_threshold(dev[path])
        thr = thr_eer if opts["threshold_policy"] == "eer" else bpcer_at(
            dev[path], opts["bpcer_target"]
        )
        a, b = apcer_bpcer(test[path], thr)
        report[path] = {
            "apcer": a,
            "bpcer": b,
            "acer": acer(a, b),
            "eer": eer,
            "hter": hter(test[path], thr),
            "tpr_at_fpr": tpr_at_fpr(test[path]),
            "threshold": thr,
        }
    _echo_config("eval", {**opts, "modalities": ",".join(tags)}, out)
    from .figures import save_score_hist

    save_score_hist({p: (s.scores, s.labels) for p, s in test.items()}, out / "score_hist.png")
    _write_report(report, out, args.json_style)
    return EXIT_OK


def cmd_cross_eval(args) -> int:
    opts = _resolve(args, {"modalities": None})
    out = _outdir(args.out)
    model = MAViT.load(args.ckpt)
    tags = _parse_tags(opts["modalities"], model)
    home_dev = _path_scores(model, load_dataset(args.dev_data, modalities=tags), "dev", tags)
    foreign = _path_scores(model, load_dataset(args.test_data, modalities=tags), "test", tags)
    report: dict[str, dict[str, float]] = {}
    for path in sorted(foreign):
        thr, _ = eer_threshold(home_dev[path])
        report[path] = {"threshold": thr, "hter": hter(foreign[path], thr)}
    _echo_config("cross-eval", {**opts, "modalities": ",".join(tags)}, out)
    from .figures import save_score_hist

    save_score_hist(
        {p: (s.scores, s.labels) for p, s in foreign.items()}, out / "score_hist.png"
    )
    _write_report(report, out, args.json_style)
    return EXIT_OK


# ---------------------------------------------------------------------------
# dump-masks


def _write_pgm(path: Path, grid: np.ndarray) -> None:
    h, w = grid.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in grid)
    path.write_text(f"P2\n{w} {h}\n1\n{rows}\n")


def _cue_grid(cue: tuple[int, int], side: int) -> np.ndarray:
    g = np.zeros((side, side), dtype=np.uint8)
    g[cue[0], cue[1]] = 1
    return g


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def cmd_dump_masks(args) -> int:
    opts = _resolve(args, {"sample": 0, "split": "test", "layer": None})
    out = _outdir(args.out)
    model = MAViT.load(args.ckpt)
    if not model.config.use_mda:
        raise MavitError("this checkpoint was trained without the disentangling path")
    tags = [m.tag for m in model.config.modalities]
    dataset = load_dataset(args.data, modalities=tags)
    records = dataset.split(opts["split"])
    if not 0 <= opts["sample"] < len(records):
        raise MavitError(
            f"sample index {opts['sample']} out of range for split "
            f"{opts['split']!r} with {len(records)} samples"
        )
    layer = opts["layer"] if opts["layer"] is not None else model.config.blocks - 1
    if not 0 <= layer < model.config.blocks:
        raise MavitError(f"layer {layer} out of range; model has {model.config.blocks} blocks")
    record = records[opts["sample"]]
    images = {t: dataset.image(record, t)[None] for t in tags}
    state = model.encode_images(images, record_masks=True)
    side = model.config.grid
    from .attention import mask_to_grids
    from .figures import save_mask_panel

    report: dict = {
        "sample": record.sample_id,
        "layer": layer,
        "pixels_per_grid": model.config.n_patches,
    }
    panel: dict[str, np.ndarray] = {}
    families = {
        "modality": "modality_mask",
        "attention": "attention_mask",
        "informative": "informative_mask",
    }
    iou_report: dict[str, float] = {}
    for tag in tags:
        masks = state.masks[(layer, tag)]
        for family, attr in families.items():
            grids = mask_to_grids(getattr(masks, attr).reshape(-1, 1, side * side))
            panel[f"{tag} {family}"] = grids
            for h in range(grids.shape[0]):
                _write_pgm(out / f"{tag}_layer{layer}_head{h}_{family}.pgm", grids[h])
        if record.cue_patch is not None:
            cue = _cue_grid(record.cue_patch, side)
            info = mask_to_grids(masks.informative_mask.reshape(-1, 1, side * side))
            for h in range(info.shape[0]):
                iou_report[f"{tag}.h{h}"] = _iou(info[h], cue)
    if iou_report:
        report["iou"] = iou_report
    save_mask_panel(panel, out / "masks.png")
    _echo_config("dump-masks", opts, out)
    _write_report(report, out, args.json_style)
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check


_GRAD_SPEC = {
    "seed": None,
    "embed_dim": 16,
    "heads": 2,
    "blocks": 2,
    "image_size": 32,
    "patch_size": 8,
    "mlp_ratio": 4.0,
    "mask_mass": 0.8,
    "tolerance": 1e-4,
    "step": 1e-5,
}


def cmd_grad_check(args) -> int:
    opts = _resolve(args, _GRAD_SPEC)
    config = ModelConfig(
        image_size=opts["image_size"],
        patch_size=opts["patch_size"],
        embed_dim=opts["embed_dim"],
        heads=opts["heads"],
        blocks=opts["blocks"],
        mlp_ratio=opts["mlp_ratio"],
        mask_mass=opts["mask_mass"],
    )
    model = MAViT(config, seed=opts["seed"])
    rng = np.random.default_rng([opts["seed"], 1])
    images = {
        m.tag: rng.uniform(0.0, 1.0, size=(m.channels, config.image_size, config.image_size))
        for m in config.modalities
    }
    pair = LabeledPair(images=images, y_cls=1)
    loss_fn = model.patch_loss_closure(
        {t: img[None] for t, img in pair.images.items()}, np.array([pair.y_cls])
    )

    bias = None
    if args.self_test_corrupt:
        bias = {model.store.names()[0]: 1.0}
    report = grad_check(
        loss_fn,
        model.store.items(),
        tolerance=opts["tolerance"],
        step=opts["step"],
        analytic_bias=bias,
    )
    for line in report.lines():
        sys.stdout.write(line + "\n")
    verdict = "pass" if report.passed() else "fail"
    sys.stdout.write(f"gradient_check={verdict}\n")
    sys.stdout.write(f"max_rel_err={report.max_rel_err!r}\n")
    if args.out:
        out = _outdir(args.out)
        _echo_config("grad-check", opts, out)
        (out / "report.txt").write_text(
            "\n".join(report.lines() + [f"gradient_check={verdict}"]) + "\n"
        )
    return EXIT_OK if report.passed() else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mavit",
        description="modality-agnostic transformer for face anti-spoofing, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with defaults for this command")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--json-style", dest="json_style", action="store_true",
                       help="emit the machine-readable report variant")

    p = sub.add_parser("gen", help="generate a synthetic multi-spectral dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--dev", type=int, default=None)
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    p.add_argument("--live-fraction", dest="live_fraction", type=float, default=None)
    p.add_argument("--cue-strength", dest="cue_strength", type=float, default=None)
    p.add_argument("--nuisance-strength", dest="nuisance_strength", type=float, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--mlp-ratio", dest="mlp_ratio", type=float, default=None)
    p.add_argument("--mask-mass", dest="mask_mass", type=float, default=None)
    p.add_argument("--ablate", choices=["matb", "mda", "cma"], default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fixed or flexible-modal evaluation")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modalities", default=None, help="comma-separated subset, e.g. R or R,D")
    p.add_argument("--threshold-policy", dest="threshold_policy",
                   choices=["eer", "bpcer"], default=None)
    p.add_argument("--bpcer-target", dest="bpcer_target", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-eval", help="dev threshold from one dataset, HTER on another")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dev-data", dest="dev_data", required=True)
    p.add_argument("--test-data", dest="test_data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modalities", default=None)
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("dump-masks", help="export token-selection grids for one sample")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--layer", type=int, default=None)
    p.set_defaults(func=cmd_dump_masks)

    p = sub.add_parser("grad-check", help="finite-difference check on a tiny model")
    common(p)
    p.add_argument("--out", default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    p.add_argument("--mlp-ratio", dest="mlp_ratio", type=float, default=None)
    p.add_argument("--mask-mass", dest="mask_mass", type=float, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--self-test-corrupt", dest="self_test_corrupt", action="store_true",
                   help="negative control: corrupt one analytic gradient")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainAbort as exc:
        sys.stderr.write(f"mavit: {exc}\n")
        return EXIT_NUMERIC
    except NumericError as exc:
        sys.stderr.write(f"mavit: {exc}\n")
        return EXIT_NUMERIC
    except MavitError as exc:
        sys.stderr.write(f"mavit: {exc}\n")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        sys.stderr.write(f"mavit: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
