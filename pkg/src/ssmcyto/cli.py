"""Command-line driver: synth -> prepare -> balance -> train -> ensemble -> eval.

Exit codes: 0 success, 1 contract/configuration error, 2 I/O or file
format error.  `SSMCYTO_THREADS` caps the BLAS thread pools (default:
all cores); set it to 1 for bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from .errors import FormatError, SsmCytoError
from .errors import ConfigError, ContractError

_PROG = "ssmcyto"

# Every RunConfig field with its default; unknown keys are rejected.
RUN_CONFIG_DEFAULTS = {
    "seed": 0,
    "dataset": {"root": "", "ratios": "4:1", "image_size": 32},
    "augmentation": {
        "rotation_deg": 360.0,
        "translate_frac": 0.10,
        "scale": [0.90, 1.10],
        "shear_deg": 5.0,
        "hflip_p": 0.5,
        "vflip_p": 0.5,
        "brightness": 0.10,
        "contrast": 0.10,
        "saturation": 0.05,
        "hue": 0.02,
        "blur_kernel": 3,
        "blur_sigma": [0.1, 1.0],
        "targets": 0,
    },
    "model": {
        "variant": "vanilla",
        "patch_size": 4,
        "stage_depths": [1, 1, 2],
        "stage_dims": [32, 64, 128],
        "n_state": 8,
        "conv_kernel": 3,
        "groups": 2,
        "window": 2,
    },
    "train": {
        "epochs": 10,
        "batch_size": 32,
        "lr": 1e-3,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.05,
        "use_class_weights": True,
        "use_augmentation": False,
    },
    "ensemble": {"holdout_fraction": 0.2, "hidden": 64, "epochs": 5, "lr": 5e-2},
    "output": {"directory": "."},
}


def _merge_strict(defaults: dict, user: dict, source: str, prefix="") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown key {dotted!r} in config {source!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(
                    f"key {dotted!r} in config {source!r} must be an object"
                )
            out[key] = _merge_strict(defaults[key], value, source, f"{dotted}.")
        else:
            out[key] = value
    return out


def load_run_config(path=None) -> dict:
    """Defaults overlaid with the JSON at `path`; strict about keys."""
    if path is None:
        return copy.deepcopy(RUN_CONFIG_DEFAULTS)
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot open config {os.fspath(path)!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {os.fspath(path)!r} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise FormatError(f"config {os.fspath(path)!r} must hold a JSON object")
    return _merge_strict(RUN_CONFIG_DEFAULTS, user, os.fspath(path))


def parse_ratios(text: str):
    try:
        parts = [float(p) for p in text.split(":")]
    except ValueError:
        raise ConfigError(f"--ratios must look like 4:1 or 7:1:2, got {text!r}")
    if len(parts) < 2 or any(p <= 0 for p in parts):
        raise ConfigError(f"--ratios needs >= 2 positive numbers, got {text!r}")
    return tuple(parts)


def parse_targets(text: str, classes):
    """Either one integer for every class or name=count pairs."""
    text = text.strip()
    if "=" not in text:
        try:
            return [int(text)] * len(classes)
        except ValueError:
            raise ConfigError(
                f"--targets must be an integer or name=count pairs, got {text!r}"
            )
    targets = [0] * len(classes)
    for pair in text.split(","):
        name, _, count = pair.partition("=")
        name = name.strip()
        if name not in classes:
            raise ConfigError(f"--targets names unknown class {name!r}")
        try:
            targets[classes.index(name)] = int(count)
        except ValueError:
            raise ConfigError(f"--targets has non-integer count in {pair!r}")
    return targets


def _augment_params(run: dict):
    from .data import AugmentParams

    section = {k: v for k, v in run["augmentation"].items() if k != "targets"}
    for key in ("scale", "blur_sigma"):
        section[key] = tuple(section[key])
    return AugmentParams(**section)


def _model_config(run: dict, variant: str, n_classes: int):
    from .model import ModelConfig

    m = run["model"]
    return ModelConfig(
        variant=variant,
        image_size=run["dataset"]["image_size"],
        patch_size=m["patch_size"],
        stage_depths=tuple(m["stage_depths"]),
        stage_dims=tuple(m["stage_dims"]),
        n_classes=n_classes,
        n_state=m["n_state"],
        conv_kernel=m["conv_kernel"],
        groups=m["groups"],
        window=m["window"],
        seed=run["seed"],
    )


def _train_config(run: dict):
    from .train import TrainConfig

    t = dict(run["train"])
    t["betas"] = tuple(t["betas"])
    return TrainConfig(seed=run["seed"], **t)


def _apply_thread_cap():
    cap = os.environ.get("SSMCYTO_THREADS")
    if not cap:
        return
    try:
        n = int(cap)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"SSMCYTO_THREADS must be a positive integer, got {cap!r}")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import generate_dataset

    if args.counts:
        try:
            counts = [int(c) for c in args.counts.split(",")]
        except ValueError:
            raise ConfigError(f"--counts must be comma-separated integers, got {args.counts!r}")
    else:
        counts = args.per_class
    names = generate_dataset(
        args.out, counts, noise=args.noise, seed=args.seed, size=args.size
    )
    total = sum(
        len(os.listdir(os.path.join(args.out, n))) for n in names
    )
    print(f"wrote {total} images across {len(names)} classes under {args.out}")
    return 0


def cmd_prepare(args) -> int:
    from .data import load_manifest, save_manifest, stratified_split
    from .ensemble import partition_holdout

    m = load_manifest(args.root)
    m = stratified_split(m, parse_ratios(args.ratios), args.seed)
    if args.holdout > 0:
        m = partition_holdout(m, args.holdout, args.seed)
    save_manifest(m, args.out)
    tallies = ", ".join(
        f"{name}={sum(1 for s in m.samples if s.split == name)}"
        for name in ("train", "holdout", "val", "test")
        if any(s.split == name for s in m.samples)
    )
    print(f"manifest {args.out}: {len(m.samples)} samples ({tallies})")
    return 0


def cmd_balance(args) -> int:
    from .data import balance_plan, balance_dataset, read_manifest, save_manifest

    m = read_manifest(args.manifest)
    targets = parse_targets(args.targets, m.classes)
    params = _augment_params(load_run_config(args.config))
    plan = balance_plan(m, targets)
    out = balance_dataset(m, targets, params, args.seed, args.out)
    save_manifest(out, os.path.join(args.out, "manifest.csv"))
    for name, extra in zip(m.classes, plan):
        if extra:
            print(f"{name}: +{extra} augmented copies")
    print(f"balanced manifest written to {os.path.join(args.out, 'manifest.csv')}")
    return 0


def cmd_train(args) -> int:
    from .data import read_manifest
    from .train import save_checkpoint, train_model

    run = load_run_config(args.config)
    m = read_manifest(args.manifest)
    model_cfg = _model_config(run, args.variant, len(m.classes))
    train_cfg = _train_config(run)
    augment = _augment_params(run) if train_cfg.use_augmentation else None
    ckpt, history = train_model(m, model_cfg, train_cfg, augment, log_fn=print)
    save_checkpoint(ckpt, args.out)
    last = history[-1] if history else {}
    print(
        f"saved {args.variant} checkpoint to {args.out}"
        + (f" (final train loss {last['train_loss']:.4f})" if last else "")
    )
    return 0


def cmd_ensemble(args) -> int:
    from .data import read_manifest, save_manifest
    from .ensemble import EnsembleSpec, partition_holdout, save_ensemble, train_meta

    run = load_run_config(args.config)
    m = read_manifest(args.manifest)
    fraction = run["ensemble"]["holdout_fraction"]
    if not any(s.split == "holdout" for s in m.samples):
        # fallback for manifests prepared without --holdout; the partition
        # is recorded next to the spec so the meta's data trail is explicit
        m = partition_holdout(m, fraction, run["seed"])
        partitioned = args.out + ".manifest.csv"
        save_manifest(m, partitioned)
        print(f"no holdout split in {args.manifest}; partitioned copy at {partitioned}")
    spec = EnsembleSpec(
        base_checkpoints=list(args.bases),
        n_classes=len(m.classes),
        holdout_fraction=fraction,
        hidden=run["ensemble"]["hidden"],
        seed=run["seed"],
    )
    from .train import TrainConfig

    meta, info = train_meta(
        spec, m, epochs=run["ensemble"]["epochs"],
        train_cfg=TrainConfig(lr=run["ensemble"]["lr"], seed=run["seed"]),
        log_fn=print,
    )
    meta_path = os.path.splitext(args.out)[0] + ".meta.ckpt"
    save_ensemble(spec, meta, args.out, meta_path)
    acc = info["history"][-1]["holdout_accuracy"] if info["history"] else float("nan")
    print(f"ensemble spec {args.out} (holdout accuracy {acc:.4f})")
    return 0


def _evaluate_model(model_path, manifest, split):
    """Predictions + class names for either a checkpoint or an ensemble spec."""
    from .data import load_image, preprocess
    from .ensemble import ensemble_predict, load_bases, load_ensemble
    from .train import load_checkpoint, params_from_checkpoint, model_config_from_checkpoint

    samples = manifest.subset(split)
    if not samples:
        raise ContractError(f"manifest has no samples in split {split!r}")
    y = np.array([s.label for s in samples])

    if os.fspath(model_path).endswith(".json"):
        spec, meta = load_ensemble(model_path)
        bases = load_bases(spec)
        cfg, stats, classes = bases[0].cfg, bases[0].stats, bases[0].classes
        predict = lambda x: ensemble_predict(bases, meta, x)[1]
    else:
        ckpt = load_checkpoint(model_path)
        cfg = model_config_from_checkpoint(ckpt)
        params = params_from_checkpoint(ckpt)
        stats = ckpt.header.get("stats")
        classes = ckpt.header["classes"]
        from .train import predict_classes

        predict = lambda x: predict_classes(x, cfg, params)
    if list(classes) != list(manifest.classes):
        raise ConfigError(
            f"model {os.fspath(model_path)!r} was trained on classes {classes}, "
            f"manifest has {manifest.classes}"
        )

    preds = []
    for start in range(0, len(samples), 64):
        x = np.stack(
            [
                preprocess(load_image(s.path), cfg.image_size, stats).data
                for s in samples[start:start + 64]
            ]
        )
        preds.append(np.atleast_1d(predict(x)))
    return y, np.concatenate(preds), classes


def cmd_eval(args) -> int:
    from .data import read_manifest
    from .metrics import confusion_matrix, confusion_to_csv, emit_report, weighted_metrics

    m = read_manifest(args.manifest)
    y, preds, classes = _evaluate_model(args.model, m, args.split)
    report = weighted_metrics(confusion_matrix(y, preds, len(classes)))
    emit_report(
        report, args.out, classes, os.path.basename(os.fspath(args.model)),
        args.split, timestamp=args.timestamp,
    )
    if args.csv:
        confusion_to_csv(report.confusion, args.csv, classes)
    print(
        f"{args.split}: accuracy {report.accuracy:.4f}  "
        f"weighted F1 {report.weighted_f1:.4f}  report {args.out}"
    )
    return 0


def cmd_selftest(args) -> int:
    """Fast invariant sweep over the numerical core."""
    from . import selftest

    failures = selftest.run(log_fn=print)
    if failures:
        raise ContractError(f"{failures} self-test suite(s) failed")
    return 0


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # argparse normally exits(2) on bad flags; route through the
    # package's exit-code contract instead (usage errors are exit 1)
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=_PROG, description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic 8-class dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=100, help="images per class")
    p.add_argument("--counts", help="comma-separated per-class counts (overrides --per-class)")
    p.add_argument("--noise", type=float, default=0.1, help="additive noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32, help="image side length")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="scan a dataset tree and write a split manifest")
    p.add_argument("--root", required=True, help="dataset root (class subdirectories)")
    p.add_argument("--ratios", default="4:1", help="split ratios, e.g. 4:1 or 7:1:2")
    p.add_argument("--holdout", type=float, default=0.0,
                   help="fraction of train re-tagged as the meta-learner holdout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest CSV path")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("balance", help="top up minority classes with augmented copies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--targets", required=True,
                   help="target train count: one integer or name=count pairs")
    p.add_argument("--config", help="RunConfig JSON for augmentation overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for augmented images + manifest")
    p.set_defaults(fn=cmd_balance)

    p = sub.add_parser("train", help="train one base model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", required=True,
                   choices=["vanilla", "vim", "vmamba_ss2d", "mambavision",
                            "medmamba", "localmamba"])
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ensemble", help="partition holdout and train the meta-learner")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--bases", required=True, nargs="+", help="base checkpoint paths")
    p.add_argument("--out", required=True, help="ensemble spec JSON path")
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("eval", help="evaluate a checkpoint or ensemble on one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="model .ckpt or ensemble spec .json")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="optional confusion-matrix CSV path")
    p.add_argument("--timestamp", help="inject a fixed report timestamp")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("selftest", help="run the numerical invariant suites")
    p.set_defaults(fn=cmd_selftest)
    return parser


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _apply_thread_cap()
        return args.fn(args)
    except FormatError as exc:
        print(f"{_PROG}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{_PROG}: error: {exc}", file=sys.stderr)
        return 2
    except SsmCytoError as exc:
        print(f"{_PROG}: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
