"""Command-line interface: ``octave-unet <subcommand> [flags]``.

Exit status: 0 on success, 1 for invalid input or configuration, 2 for
runtime failures (non-finite training, I/O).  Values come from built-in
defaults, then ``--config FILE`` (JSON with flag names as keys, dashes or
underscores), then explicit flags.  Every run that writes output stores the
resolved values in ``<out>/config.json``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, evaluation, spectral
from .data import DatasetSpec, load_dataset, make_splits, read_image, select, synth_vessels, write_dataset, write_image
from .errors import CheckpointError, ConfigError, DataError, NonFiniteError, OctaveUNetError, ShapeError
from .gradcheck import run_suite
from .training import WEIGHT_MODES, TrainConfig, evaluate_model, train
from .unet import ModelConfig, build, build_baseline, count_flops, count_params, measure_macs, predict

logger = logging.getLogger("octave_unet")

SUBCOMMANDS = ("train", "eval", "predict", "sweep-alpha", "analyze-frequency", "synth-data", "cost", "check-grad")

DEFAULTS = {
    "dataset": "synthetic",
    "data_root": None,
    "alpha": 0.5,
    "depth": 4,
    "base_channels": 64,
    "strict_equation_activation": False,
    "epochs": 1000,
    "batch_size": 1,
    "lr": 1e-3,
    "loss_weight_mode": "paper-ratio",
    "pos_weight": None,
    "threshold": 0.5,
    "fov": False,
    "seed": 0,
    "threads": None,
    "out": None,
    "augment": True,
    "fold": None,
    "checkpoint": None,
    "baseline_checkpoint": None,
    "image": None,
    "alphas": [0.0, 0.25, 0.5, 0.75],
    "taps": ["encoder0"],
    "power": False,
    "height": 576,
    "width": 592,
    "train_count": 32,
    "test_count": 8,
    "size": 64,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    # defaults are SUPPRESSed so that only explicit flags override the config file
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S, help="BLAS threads; 1 gives bit-reproducible runs")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--dataset", default=S, help="DRIVE, STARE, CHASE_DB1, HRF, synthetic or custom")
    p.add_argument("--data-root", default=S)
    p.add_argument("--alpha", type=float, default=S, help="share of low-frequency channels")
    p.add_argument("--depth", type=int, default=S, help="number of encoder levels")
    p.add_argument("--base-channels", type=int, default=S)
    p.add_argument("--strict-equation-activation", action="store_true", default=S,
                   help="activate every octave path before summation")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--loss-weight-mode", choices=WEIGHT_MODES, default=S)
    p.add_argument("--pos-weight", type=float, default=S, help="positive-class weight for manual mode")
    p.add_argument("--no-augment", dest="augment", action="store_false", default=S)
    p.add_argument("--threshold", type=float, default=S)
    p.add_argument("--fov", action="store_true", default=S, help="restrict metrics to the FOV mask")
    # synthetic data, generated in memory when --dataset synthetic has no --data-root
    p.add_argument("--train-count", type=int, default=S)
    p.add_argument("--test-count", type=int, default=S)
    p.add_argument("--size", type=int, default=S, help="synthetic image side in pixels")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="octave-unet", description="Octave UNet retinal vessel segmentation")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    S = argparse.SUPPRESS

    p = sub.add_parser("train", help="train a model and evaluate it on the test split")
    _add_common(p)
    p.add_argument("--fold", type=int, default=S, help="leave-one-out fold to run (default: all)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("predict", help="segment one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("sweep-alpha", help="train and compare several alpha values")
    _add_common(p)
    p.add_argument("--alphas", type=float, nargs="+", default=S)

    p = sub.add_parser("analyze-frequency", help="feature-map spectra of a baseline and an octave model")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="octave model")
    p.add_argument("--baseline-checkpoint", required=True)
    p.add_argument("--taps", nargs="+", default=S)
    p.add_argument("--power", action="store_true", default=S, help="power instead of magnitude spectra")

    p = sub.add_parser("synth-data", help="write a synthetic dataset tree")
    _add_common(p)

    p = sub.add_parser("cost", help="parameter count and FLOPs of a configuration")
    _add_common(p)
    p.add_argument("--height", type=int, default=S)
    p.add_argument("--width", type=int, default=S)

    p = sub.add_parser("check-grad", help="finite-difference gradient checks")
    _add_common(p)
    return parser


def resolve(argv: Sequence[str]) -> tuple[str, dict]:
    """Parse ``argv`` into ``(command, settings)`` with file < flag precedence."""
    ns = vars(build_parser().parse_args(list(argv)))
    command = ns.pop("command")
    settings = dict(DEFAULTS)
    cfg_path = ns.pop("config", None)
    if cfg_path is not None:
        try:
            loaded = json.loads(Path(cfg_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {cfg_path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {cfg_path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in loaded.items():
            k = key.replace("-", "_")
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            settings[k] = value
    settings.update(ns)
    return command, settings


def _model_config(s: dict, alpha: Optional[float] = None) -> ModelConfig:
    cfg = ModelConfig(depth=s["depth"], base_channels=s["base_channels"],
                      alpha=s["alpha"] if alpha is None else alpha,
                      strict_equation=bool(s["strict_equation_activation"]))
    cfg.validate()
    return cfg


def _train_config(s: dict) -> TrainConfig:
    return TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"],
                       loss_weight_mode=s["loss_weight_mode"], pos_weight=s["pos_weight"],
                       seed=s["seed"], augment=bool(s["augment"]), threshold=s["threshold"])


def _out_dir(s: dict) -> Path:
    if not s["out"]:
        raise ConfigError("--out is required for this command")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, command: str, s: dict) -> None:
    (out / "config.json").write_text(json.dumps({"command": command, **s}, indent=2, sort_keys=True) + "\n")


def _samples(s: dict):
    """All samples for the configured dataset; synthetic data is generated when no root is given."""
    if s["dataset"] == "synthetic" and not s["data_root"]:
        train = [x.with_(split="training") for x in synth_vessels(s["train_count"], s["size"], rng=s["seed"], prefix="train")]
        test = [x.with_(split="test") for x in synth_vessels(s["test_count"], s["size"], rng=s["seed"] + 1, prefix="test")]
        return train + test, "fixed-train-test"
    if not s["data_root"]:
        raise ConfigError(f"--data-root is required for dataset {s['dataset']}")
    spec = DatasetSpec(s["dataset"], Path(s["data_root"]))
    return load_dataset(spec), spec.split_policy


def _folds(s: dict):
    samples, policy = _samples(s)
    folds = make_splits(samples, policy)
    if s["fold"] is not None:
        if not 0 <= s["fold"] < len(folds):
            raise ConfigError(f"fold must be in [0, {len(folds) - 1}]")
        folds = [folds[s["fold"]]]
    return samples, folds


def _report_all(model, test, s: dict, out: Path) -> evaluation.EvalReport:
    report = evaluate_model(model, test, threshold=s["threshold"], use_fov=False)
    evaluation.write_report(report, out)
    if any(x.fov is not None for x in test):
        fov_report = evaluate_model(model, test, threshold=s["threshold"], use_fov=True)
        evaluation.write_report(fov_report, out, suffix="_fov")
        if s["fov"]:
            report = fov_report
    return report


def _print_summary(summary: dict) -> None:
    print("  ".join(f"{k.upper()} {v:.4f}" for k, v in summary.items()))


def cmd_train(s: dict) -> None:
    out = _out_dir(s)
    _write_config(out, "train", s)
    samples, folds = _folds(s)
    for i, (train_ids, test_ids) in enumerate(folds):
        fold_out = out if len(folds) == 1 else out / f"fold_{i:02d}"
        model = build(_model_config(s), s["seed"])
        test = select(samples, test_ids)
        train(model, select(samples, train_ids), _train_config(s), val_samples=test, out_dir=fold_out)
        _print_summary(_report_all(model, test, s, fold_out).summary())


def cmd_eval(s: dict) -> None:
    out = _out_dir(s)
    _write_config(out, "eval", s)
    model = checkpoint.load(s["checkpoint"])
    samples, folds = _folds(s)
    test = select(samples, folds[0][1]) if len(folds) == 1 else samples
    report = _report_all(model, test, s, out)
    for x in test:
        prob = predict(model, x.image)
        write_image(out / "maps" / f"{x.id}.png",
                    evaluation.analytical_map(evaluation.binarize(prob, s["threshold"]), x.truth))
    _print_summary(report.summary())


def cmd_predict(s: dict) -> None:
    out = _out_dir(s)
    _write_config(out, "predict", s)
    model = checkpoint.load(s["checkpoint"])
    image = read_image(s["image"])
    if image.shape[0] != model.config.input_channels:
        raise DataError(f"model expects {model.config.input_channels} channels, image has {image.shape[0]}")
    prob = predict(model, image)
    stem = Path(s["image"]).stem
    write_image(out / f"{stem}_prob.png", prob)
    write_image(out / f"{stem}_binary.png", evaluation.binarize(prob, s["threshold"]).astype(np.float32))
    print(out / f"{stem}_prob.png")


def cmd_sweep_alpha(s: dict) -> None:
    out = _out_dir(s)
    _write_config(out, "sweep-alpha", s)
    samples, folds = _folds(s)
    train_ids, test_ids = folds[0]
    test = select(samples, test_ids)
    h, w = test[0].shape
    grid = 2 ** s["depth"]
    h, w = -(-h // grid) * grid, -(-w // grid) * grid
    rows = []
    for alpha in s["alphas"]:
        model = build(_model_config(s, alpha), s["seed"])
        train(model, select(samples, train_ids), _train_config(s), out_dir=out / f"alpha_{alpha}")
        m = _report_all(model, test, s, out / f"alpha_{alpha}").summary()
        rows.append({"alpha": alpha, "params": count_params(model), "gflops": count_flops(model, h, w) / 1e9, **m})
    keys = ["alpha", "params", "gflops", "acc", "se", "sp", "f1", "auroc", "ap"]
    lines = [",".join(keys)] + [",".join(repr(r[k]) for k in keys) for r in rows]
    (out / "alpha_sweep.csv").write_text("\n".join(lines) + "\n")
    print(f"{'alpha':>6}{'params':>11}{'GFLOPs':>9}" + "".join(f"{k.upper():>8}" for k in keys[3:]))
    for r in rows:
        print(f"{r['alpha']:>6}{r['params']:>11}{r['gflops']:>9.3f}" + "".join(f"{r[k]:>8.4f}" for k in keys[3:]))


def cmd_analyze_frequency(s: dict) -> None:
    out = _out_dir(s)
    _write_config(out, "analyze-frequency", s)
    octave_model = checkpoint.load(s["checkpoint"])
    baseline_model = checkpoint.load(s["baseline_checkpoint"])
    samples, folds = _folds(s)
    test = select(samples, folds[0][1]) if len(folds) == 1 else samples
    result = spectral.compare_models(baseline_model, octave_model, [x.image for x in test],
                                     taps=s["taps"], power=bool(s["power"]))
    spectral.write_comparison(result, out)
    for tag, frac in result.fractions(0.125).items():
        print(f"{tag}: energy within normalized radius 0.125 = {frac:.4f}")


def cmd_synth_data(s: dict) -> None:
    out = _out_dir(s)
    samples, _ = _samples(dict(s, data_root=None))
    write_dataset(samples, out)
    _write_config(out, "synth-data", s)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_cost(s: dict) -> None:
    h, w = s["height"], s["width"]
    cfg = _model_config(s)
    model = build(cfg, s["seed"])
    reference = build(_model_config(s, 0.0), s["seed"])
    flops, ref_flops = count_flops(model, h, w), count_flops(reference, h, w)
    measured = 2 * measure_macs(model, h, w) if h * w <= 256 * 256 else None
    print(f"alpha {cfg.alpha}  input {h}x{w}")
    print(f"parameters {count_params(model)}  (alpha=0: {count_params(reference)})")
    print(f"GFLOPs {flops / 1e9:.3f}  (alpha=0: {ref_flops / 1e9:.3f})")
    print(f"FLOPs ratio vs alpha=0: {flops / ref_flops:.4f}")
    if measured is not None:
        print(f"measured GFLOPs {measured / 1e9:.3f}")
    if s["out"]:
        out = _out_dir(s)
        _write_config(out, "cost", s)


def cmd_check_grad(s: dict) -> int:
    results = run_suite(s["seed"])
    for case in results:
        status = "PASS" if case.report.passed else "FAIL"
        print(f"{status} {case.name}: max relative error {case.report.max_error:.3e} "
              f"(tolerance {case.report.tolerance:g})")
    return 0 if all(c.report.passed for c in results) else 2


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sweep-alpha": cmd_sweep_alpha,
    "analyze-frequency": cmd_analyze_frequency,
    "synth-data": cmd_synth_data,
    "cost": cmd_cost,
    "check-grad": cmd_check_grad,
}


def _thread_limit(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        command, settings = resolve(sys.argv[1:] if argv is None else argv)
        with _thread_limit(settings["threads"]):
            code = COMMANDS[command](settings)
        return code or 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, DataError, ShapeError, CheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, OSError, OctaveUNetError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
