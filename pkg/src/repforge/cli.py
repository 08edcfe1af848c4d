"""Command-line entry point: ``repforge {synth,train,eval,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from repforge import __version__

log = logging.getLogger("repforge")


class CommandError(Exception):
    """Runtime failure reported on stderr with exit code 1."""


class UsageError(Exception):
    """Bad argument value; reported through argparse with exit code 2."""


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _thread_limit():
    value = os.environ.get("REPFORGE_THREADS", "").strip()
    if not value:
        return contextlib.nullcontext()
    if not value.isdigit():
        log.warning("ignoring non-integer REPFORGE_THREADS=%r", value)
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from repforge.synthgen import SynthConfig, export, generate_dataset

    try:
        cfg = SynthConfig(
            num_classes=args.classes,
            sets_per_class=args.sets_per_class,
            seed=args.seed,
            **({"base_noise_sigma": args.noise} if args.noise is not None else {}),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sets = generate_dataset(cfg)
    try:
        export(sets, args.out, cfg.num_classes)
    except OSError as exc:
        raise CommandError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(sets)} sets ({sum(len(s.reps) for s in sets)} reps) to {args.out}")
    return 0


def _load_sets(path):
    from repforge.dataset import DatasetFormatError, ingest

    try:
        return ingest(path)
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc}") from None
    except DatasetFormatError as exc:
        raise CommandError(f"{path}: {exc}") from None


def cmd_train(args) -> int:
    from repforge.dataset import split_by_set
    from repforge.model import GeometryError, ModelConfig, build_model
    from repforge.optimizer import AdamState
    from repforge.training import TrainConfig, TrainingDivergedError, run_training, save_checkpoint

    if not 0.0 < args.test_fraction < 1.0:
        raise UsageError(f"--test-fraction must be in (0, 1), got {args.test_fraction}")
    if args.epochs < 1 or args.batch < 1 or args.lr <= 0:
        raise UsageError("--epochs and --batch must be >= 1 and --lr must be positive")
    sets = _load_sets(args.data)
    if not sets:
        raise CommandError(f"{args.data} holds no sets")
    num_classes = args.num_classes or max(s.exercise_id for s in sets) + 1
    try:
        split = split_by_set(sets, args.test_fraction, args.seed, per_feature=not args.global_standardize)
        mcfg = ModelConfig(
            variant=args.layout,
            depth=args.depth,
            num_classes=num_classes,
            seed=args.seed,
            dropout_on_conv=args.dropout_on_conv,
        )
        model = build_model(mcfg)
    except (GeometryError, ValueError) as exc:
        raise CommandError(str(exc)) from None
    tcfg = TrainConfig(batch_size=args.batch, epochs=args.epochs, lr=args.lr, shuffle_seed=args.seed)

    out = Path(args.out_model)
    log_csv = Path(args.log_csv) if args.log_csv else out.with_name(out.name + ".log.csv")
    manifest_path = Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")
    manifest = {
        "toolkit_version": __version__,
        "command": "train",
        "model_config": mcfg.to_text().splitlines(),
        "train_config": {"batch_size": tcfg.batch_size, "epochs": tcfg.epochs, "lr": tcfg.lr, "shuffle_seed": tcfg.shuffle_seed},
        "split": {"test_fraction": args.test_fraction, "seed": args.seed, "per_feature_standardization": not args.global_standardize},
        "inputs": {str(args.data): _digest(args.data)},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    opt = AdamState(lr=tcfg.lr)
    try:
        model, history = run_training(model, split, tcfg, opt)
    except TrainingDivergedError as exc:
        raise CommandError(str(exc)) from None
    save_checkpoint(model, opt, out)
    history.to_csv(log_csv)
    final = history.records[-1]
    test = "n/a" if final.test_acc is None else f"{final.test_acc:.4f}"
    print(f"epochs={len(history.records)} loss={final.loss:.5f} train_acc={final.train_acc:.4f} test_acc={test}")
    print(f"checkpoint={out} log={log_csv} manifest={manifest_path}")
    return 0


def cmd_eval(args) -> int:
    from repforge.dataset import split_by_set
    from repforge.evaluation import evaluate
    from repforge.training import CheckpointError, load_checkpoint

    try:
        model, _ = load_checkpoint(args.model)
    except (OSError, CheckpointError) as exc:
        raise CommandError(f"cannot load model {args.model}: {exc}") from None
    if model.standardizer is None:
        raise CommandError(f"{args.model} carries no standardization statistics")
    sets = _load_sets(args.data)
    if args.test_fraction is not None:
        sets = split_by_set(sets, args.test_fraction, args.seed).test_sets
    try:
        report = evaluate(model, sets, model.standardizer)
    except ValueError as exc:
        raise CommandError(f"model and data are incompatible: {exc}") from None
    gt7 = "n/a" if report.set_accuracy_gt7 is None else f"{report.set_accuracy_gt7:.3f}"
    print(f"rep_accuracy {report.rep_accuracy:.3f}")
    print(f"set_accuracy {report.set_accuracy:.3f}")
    print(f"set_accuracy_gt7 {gt7}")
    if args.report_json:
        report.to_json(args.report_json)
    if args.confusion_csv:
        report.confusion_to_csv(args.confusion_csv)
    return 0


def cmd_gradcheck(args) -> int:
    from repforge.gradcheck import run_suite

    results = run_suite(args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} max_rel_error={r.max_rel_error:.3e} threshold={r.threshold:.0e} {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandError(f"gradient check failed for: {', '.join(failed)}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from repforge.model import VARIANTS

    parser = argparse.ArgumentParser(prog="repforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"repforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic JSON-lines dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--sets-per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--noise", type=float, default=None, help="base white-noise sigma")
    p.set_defaults(func=cmd_synth, subparser=p)

    p = sub.add_parser("train", help="train a CNN on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--layout", required=True, choices=VARIANTS)
    p.add_argument("--depth", required=True, type=int, choices=(2, 3, 4))
    p.add_argument("--out-model", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.0005)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=None, help="defaults to max label + 1")
    p.add_argument("--dropout-on-conv", action="store_true")
    p.add_argument("--global-standardize", action="store_true", help="one mean/std for all features")
    p.add_argument("--log-csv", default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-json", default=None)
    p.add_argument("--confusion-csv", default=None)
    p.add_argument("--test-fraction", type=float, default=None, help="evaluate only this split's test sets")
    p.add_argument("--seed", type=int, default=0, help="split seed used with --test-fraction")
    p.set_defaults(func=cmd_eval, subparser=p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck, subparser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        args.subparser.error(str(exc))
    except CommandError as exc:
        print(f"repforge {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
