"""Command-line front end.

Subcommands: gen, poison, train, detect, eval, adaptive, unlearn.
Exit codes: 0 success, 2 invalid configuration, 3 I/O failure,
4 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, evalkit, storage
from .detector import DetectorConfig, detect
from .nncore import NumericError, accuracy, init_mlp, make_rng, train_supervised

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_config_overrides(path):
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO)
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_CONFIG)
    if not isinstance(payload, dict):
        raise CliError("config file must hold a JSON object", EXIT_CONFIG)
    return payload


def _detector_config(args, overrides) -> DetectorConfig:
    cfg = DetectorConfig(
        outer_iters=args.outer_iters, inner_iters=args.inner_iters,
        outer_lr=args.outer_lr, inner_lr=args.inner_lr,
        ao_threshold=args.ao_threshold, gmm_beta=args.gmm_beta,
        poison_batch=args.poison_batch, base_batch=args.base_batch,
        loss_mode=args.mode, detector_logits=args.detector_logits,
        seed=args.seed)
    known = {f for f in cfg.__dataclass_fields__}
    bad = set(overrides) - known
    if bad:
        raise CliError(f"unknown config keys: {sorted(bad)}", EXIT_CONFIG)
    cfg = replace(cfg, **overrides)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    return cfg


def _config_echo(cfg: DetectorConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def _mask_summary(dataset, reveal):
    if dataset.poison_mask is None:
        return "no poison mask"
    count = int(dataset.poison_mask.sum())
    if reveal:
        idx = np.where(dataset.poison_mask)[0].tolist()
        return f"{count} poisoned samples at indices {idx}"
    return f"{count} poisoned samples (indices hidden; use --reveal-mask)"


def cmd_gen(args):
    overrides = _load_config_overrides(args.config)
    for key in ("k", "d", "per_class", "noise_sigma", "seed", "skip"):
        if key in overrides:
            setattr(args, key, overrides[key])
    try:
        ds = attacks.gen_synthetic(args.k, args.d, args.per_class,
                                   args.noise_sigma, args.seed, skip=args.skip)
    except attacks.ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    prov = {"command": "gen", "k": args.k, "d": args.d, "per_class": args.per_class,
            "noise_sigma": args.noise_sigma, "seed": args.seed, "skip": args.skip}
    storage.save_dataset(ds, args.out, prov)
    print(f"wrote {len(ds)} samples ({args.k} classes, dim {args.d}) to {args.out}")
    print(_mask_summary(ds, args.reveal_mask))


def _trigger_from_args(args, dim):
    side = int(round(dim ** 0.5))
    if args.attack in ("badnets", "clean_label"):
        return attacks.TriggerSpec.corner_patch(side, args.patch_side, args.patch_value)
    return attacks.TriggerSpec.random_blend(dim, args.blend_alpha, args.seed)


def cmd_poison(args):
    ds = storage.load_dataset(args.data)
    trigger = _trigger_from_args(args, ds.dim)
    try:
        if args.attack == "clean_label":
            out = attacks.poison_clean_label(ds, trigger, args.ratio,
                                             args.target, args.seed)
        else:
            out = attacks.poison_dirty_label(ds, trigger, args.ratio,
                                             args.target, args.seed)
    except (attacks.ConfigError, attacks.ThreatModelError) as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    out.features = storage.quantize_features(out.features)
    prov = dict(storage.dataset_provenance(args.data))
    prov.update({"command": "poison", "attack": args.attack, "ratio": args.ratio,
                 "target": args.target, "poison_seed": args.seed,
                 "patch_side": args.patch_side, "patch_value": args.patch_value,
                 "blend_alpha": args.blend_alpha})
    storage.save_dataset(out, args.out, prov)
    print(f"wrote poisoned dataset to {args.out}")
    print(_mask_summary(out, args.reveal_mask))


def cmd_train(args):
    ds = storage.load_dataset(args.data)
    if ds.labels is None:
        raise CliError("training data has no labels", EXIT_CONFIG)
    model = init_mlp([ds.dim, args.hidden, ds.n_classes], make_rng(args.seed, 0x11))
    train_supervised(model, ds.features, ds.labels, args.epochs,
                     args.batch_size, make_rng(args.seed, 0x12), args.lr)
    prov = {"command": "train", "data": str(args.data), "hidden": args.hidden,
            "epochs": args.epochs, "batch_size": args.batch_size,
            "lr": args.lr, "seed": args.seed}
    storage.save_model(model, args.out, prov)
    print(f"wrote model to {args.out}; train accuracy "
          f"{accuracy(model, ds.features, ds.labels):.4f}")


def cmd_detect(args):
    overrides = _load_config_overrides(args.config)
    cfg = _detector_config(args, overrides)
    poisoned = storage.load_dataset(args.data)
    base = storage.load_dataset(args.base)
    victim = storage.load_model(args.model)
    labels = poisoned.labels if cfg.loss_mode == "labeled" else None
    if cfg.loss_mode == "labeled" and labels is None:
        raise CliError("labeled mode but the dataset has no labels", EXIT_CONFIG)
    report = detect(victim, poisoned.features, labels, base.features, cfg)
    storage.write_detection_report(args.out, report, _config_echo(cfg),
                                   poison_mask=poisoned.poison_mask)
    print(f"flagged {len(report.flagged)} of {len(poisoned)} samples; "
          f"report in {args.out}")
    if poisoned.poison_mask is not None:
        m = evalkit.compute_metrics(report.flagged_mask, poisoned.poison_mask)
        print(f"TPR {m.tpr:.4f} FPR {m.fpr:.4f} remaining {m.remaining_poisons}")


def _experiment_spec(args) -> evalkit.ExperimentSpec:
    trigger = None
    if args.attack == "blended":
        trigger = attacks.TriggerSpec.random_blend(args.d, args.blend_alpha, args.seed)
    elif args.patch_side:
        side = int(round(args.d ** 0.5))
        trigger = attacks.TriggerSpec.corner_patch(side, args.patch_side, args.patch_value)
    attack = "clean_label" if args.attack == "clean_label" else (
        "none" if args.ratio == 0 else "dirty_label")
    spec = evalkit.ExperimentSpec(
        n_classes=args.k, dim=args.d, train_per_class=args.per_class,
        noise_sigma=args.noise_sigma, trigger=trigger, attack=attack,
        ratio=args.ratio, target_class=args.target,
        victim=evalkit.VictimConfig(hidden=args.hidden, epochs=args.epochs),
        detector=DetectorConfig(loss_mode=args.mode, seed=args.seed),
        case=args.case, base_size=args.base_size, seed=args.seed,
        clean_reference=args.clean_reference)
    try:
        spec.validate()
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    return spec


def _metrics_rows(tag, results):
    rows = []
    for r in results:
        m = r.metrics
        rows.append({
            "sweep": tag, "seed": r.seed,
            "tpr": m.tpr, "fpr": m.fpr,
            "remaining_poisons": m.remaining_poisons,
            "asr": m.asr, "acc": m.acc,
            "victim_asr": r.victim_asr, "victim_acc": r.victim_acc,
        })
    return rows


def _write_metrics_csv(path, rows):
    cols = ["sweep", "seed", "tpr", "fpr", "remaining_poisons", "asr", "acc",
            "victim_asr", "victim_acc"]
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(storage.format_float(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval(args):
    spec = _experiment_spec(args)
    rows = []
    if args.sweep:
        key, _, raw = args.sweep.partition("=")
        if not raw:
            raise CliError("--sweep expects KEY=V1,V2,...", EXIT_CONFIG)
        values = [float(v) if key == "ratio" else int(v) for v in raw.split(",")]
        try:
            results = evalkit.run_sweep(spec, key, values)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_CONFIG)
        for v, r in zip(values, results):
            rows.extend(_metrics_rows(f"{key}={v}", [r]))
    else:
        rows.extend(_metrics_rows("single", [evalkit.run_experiment(spec)]))
    out_csv = Path(args.out) / "metrics.csv"
    _write_metrics_csv(out_csv, rows)
    print(f"wrote {len(rows)} result rows to {out_csv}")
    for row in rows:
        print(f"  {row['sweep']}: TPR={row['tpr']:.4f} FPR={row['fpr']:.4f} "
              f"remaining={row['remaining_poisons']}")


def cmd_adaptive(args):
    spec = _experiment_spec(args)
    adaptive = evalkit.AdaptiveAttackConfig(
        steps=args.steps, step_size=args.step_size, linf_budget=args.linf_budget)
    vanilla = evalkit.run_experiment(spec)
    attacked = evalkit.run_experiment(replace(spec, adaptive=adaptive))
    rows = _metrics_rows("vanilla", [vanilla]) + _metrics_rows("adaptive", [attacked])
    out_csv = Path(args.out) / "metrics.csv"
    _write_metrics_csv(out_csv, rows)
    print(f"vanilla TPR {vanilla.metrics.tpr:.4f} -> adaptive TPR "
          f"{attacked.metrics.tpr:.4f}; wrote {out_csv}")


def cmd_unlearn(args):
    ds = storage.load_dataset(args.data)
    victim = storage.load_model(args.model)
    try:
        flagged_idx = [int(line) for line in
                       Path(args.flagged).read_text(encoding="utf-8").split()]
    except OSError as exc:
        raise CliError(f"cannot read flagged list: {exc}", EXIT_IO)
    flagged = np.zeros(len(ds), dtype=bool)
    flagged[flagged_idx] = True
    model = evalkit.unlearn(victim, ds, flagged, epochs=args.epochs,
                            step_size=args.lr, seed=args.seed)
    storage.save_model(model, args.out, {"command": "unlearn",
                                         "epochs": args.epochs, "lr": args.lr,
                                         "seed": args.seed})
    print(f"wrote unlearned model to {args.out} "
          f"({int(flagged.sum())} samples scrubbed)")


def _add_detector_flags(p):
    p.add_argument("--outer-iters", type=int, default=2000)
    p.add_argument("--inner-iters", type=int, default=40)
    p.add_argument("--outer-lr", type=float, default=1e-3)
    p.add_argument("--inner-lr", type=float, default=0.2)
    p.add_argument("--ao-threshold", type=float, default=2.0)
    p.add_argument("--gmm-beta", type=float, default=1e-6)
    p.add_argument("--poison-batch", type=int, default=128)
    p.add_argument("--base-batch", type=int, default=64)
    p.add_argument("--mode", choices=["labeled", "unlabeled"], default="labeled")
    p.add_argument("--detector-logits", type=int, default=None)


def _add_experiment_flags(p):
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--noise-sigma", type=float, default=0.06)
    p.add_argument("--attack", choices=["badnets", "blended", "clean_label"],
                   default="badnets")
    p.add_argument("--ratio", type=float, default=0.05)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--patch-side", type=int, default=3)
    p.add_argument("--patch-value", type=float, default=1.0)
    p.add_argument("--blend-alpha", type=float, default=0.25)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--mode", choices=["labeled", "unlabeled"], default="labeled")
    p.add_argument("--case", choices=["case0", "case1_unlabeled",
                                      "case2_ft_all", "case2_ft_last"],
                   default="case0")
    p.add_argument("--base-size", type=int, default=1000)
    p.add_argument("--clean-reference", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="offsetdetect",
        description="Detect backdoor-poisoned training samples via offset optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--noise-sigma", type=float, default=0.06)
    p.add_argument("--skip", type=int, default=0,
                   help="skip this many samples per class before taking any")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--reveal-mask", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("poison", help="poison an existing dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--attack", choices=["badnets", "blended", "clean_label"],
                   default="badnets")
    p.add_argument("--ratio", type=float, default=0.05)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--patch-side", type=int, default=3)
    p.add_argument("--patch-value", type=float, default=1.0)
    p.add_argument("--blend-alpha", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--reveal-mask", action="store_true")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train", help="train a victim model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection over a poisoned dataset")
    p.add_argument("--data", required=True, help="inspected dataset directory")
    p.add_argument("--base", required=True, help="clean base dataset directory")
    p.add_argument("--model", required=True, help="victim model directory")
    _add_detector_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="run end-to-end experiments and sweeps")
    _add_experiment_flags(p)
    p.add_argument("--sweep", default=None, help="KEY=V1,V2,... "
                   "(ratio, base_size, detector_logits, seed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adaptive", help="white-box adaptive attack experiment")
    _add_experiment_flags(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--linf-budget", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adaptive)

    p = sub.add_parser("unlearn", help="scrub flagged samples from a model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--flagged", required=True, help="file with one index per line")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unlearn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (attacks.ConfigError, attacks.ThreatModelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (storage.StorageError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
