"""Command-line entry point: ``stridecnn <command> [options]``.

Exit codes: 0 success, 1 pipeline error, 2 usage error.
"""

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    RunConfig,
    atomic_write_text,
    dataset_hash,
    generate_synthetic,
    load_dataset,
    save_dataset,
    write_manifest,
)
from .evaluation import (
    bland_altman_csv,
    bland_altman_svg,
    build_report,
    cross_validate,
    per_patient_csv,
    patientwise_kfold,
    predict_records,
    predictions_csv,
    report_csv,
)
from .gradcheck import gradient_check
from .network import DESK_CONFIG, FULL_CONFIG, REDUCED_CONFIG, NetworkConfig, load_params, save_params
from .preprocessing import (
    MS_WINDOW,
    StrideDefinition,
    normalize_and_pad,
    parse_calibration_profile,
    prepare_strides,
)
from .tensor import make_rng
from .training import TrainConfig, train, train_log_csv

logger = logging.getLogger("stridecnn")

NETWORKS = {"full": FULL_CONFIG, "desk": DESK_CONFIG, "reduced": REDUCED_CONFIG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_data(p, out=True):
    p.add_argument("--data", required=True, help="dataset directory")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def _add_definition(p):
    p.add_argument("--definition", default="msdtw", help="msdtw, hs-hs or ms-ms (default msdtw)")
    p.add_argument("--calibration", help="calibration profile for uncalibrated datasets")
    p.add_argument("--ms-window", type=int, default=MS_WINDOW, help="mid-stance energy window in samples")


def _add_training(p):
    p.add_argument("--net", choices=sorted(NETWORKS), default="full", help="network size preset")
    p.add_argument("--iterations", type=int, default=4000)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")


def build_parser():
    parser = _Parser(prog="stridecnn", description="Stride length regression from inertial sensor strides.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic stride table")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=50)
    p.add_argument("--strides-per-patient", type=int, default=12)
    p.add_argument("--noise", type=float, default=1.0, help="label noise sd in cm")
    p.add_argument("--length-mode", choices=("imbalanced", "uniform"), default="imbalanced")
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("preprocess", help="calibrate and re-segment strides")
    _add_data(p)
    _add_definition(p)

    p = sub.add_parser("train", help="train on one patient-wise split")
    _add_data(p)
    _add_definition(p)
    _add_training(p)
    p.add_argument("--holdout-folds", type=int, default=10,
                   help="hold out one of this many patient groups (0 trains on all patients)")

    p = sub.add_parser("evaluate", help="evaluate saved parameters on a table")
    _add_data(p)
    _add_definition(p)
    p.add_argument("--params", required=True)
    p.add_argument("--split", help="split.csv from train; only its test patients are evaluated")

    p = sub.add_parser("crossval", help="patient-wise k-fold cross-validation")
    _add_data(p)
    _add_definition(p)
    _add_training(p)
    p.add_argument("--folds", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=120)
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _load_inputs(args):
    """Load a table and turn it into network inputs for ``args.definition``."""
    table = load_dataset(args.data)
    definition = StrideDefinition.parse(args.definition)
    profile = None
    if args.calibration:
        profile = parse_calibration_profile(Path(args.calibration).read_text())
    if table.definition is definition:
        segment_as = StrideDefinition.MSDTW
    elif table.definition is StrideDefinition.MSDTW:
        segment_as = definition
    else:
        raise ValueError(f"table holds {table.definition.value} strides, cannot produce {definition.value}")
    ready = prepare_strides(table.strides, segment_as, profile, ms_window=args.ms_window)
    strides = [normalize_and_pad(s, definition, table.accel_range, table.gyro_range) for s in ready]
    return table, ready, strides, definition


def _run_config(args, net=None, train_cfg=None):
    return RunConfig(
        command=args.command,
        seed=getattr(args, "seed", 0),
        definition=StrideDefinition.parse(getattr(args, "definition", "msdtw")).value,
        train=dataclasses.asdict(train_cfg) if train_cfg else {},
        network=dataclasses.asdict(net) if net else {},
        folds=getattr(args, "folds", 0),
        data=str(getattr(args, "data", "")),
        out=str(getattr(args, "out", "")),
        extra={k: v for k, v in sorted(vars(args).items())
               if k in ("calibration", "ms_window", "holdout_folds", "params", "split", "net",
                        "patients", "strides_per_patient", "noise", "length_mode")},
    )


def _train_config(args):
    return TrainConfig(iterations=args.iterations, batch_size=args.batch_size,
                       log_every=args.log_every, seed=args.seed)


def _write_evaluation(out, report):
    atomic_write_text(out / "report.csv", report_csv(report))
    atomic_write_text(out / "per_patient.csv", per_patient_csv(report))
    atomic_write_text(out / "predictions.csv", predictions_csv(report.records))
    atomic_write_text(out / "bland_altman.csv", bland_altman_csv(report))
    atomic_write_text(out / "bland_altman.svg", bland_altman_svg(report))


def cmd_synth(args):
    table = generate_synthetic(args.patients, args.strides_per_patient, make_rng(args.seed),
                               noise_level=args.noise, length_mode=args.length_mode)
    out = Path(args.out)
    save_dataset(table, out)
    write_manifest(out / "manifest.txt", _run_config(args), __version__, dataset_hash(out))
    print(f"wrote {len(table)} strides from {len(table.patient_ids)} patients to {out}")


def cmd_preprocess(args):
    table, ready, _, definition = _load_inputs(args)
    out = Path(args.out)
    result = dataclasses.replace(table, strides=ready, calibrated=True, definition=definition, skipped=0)
    save_dataset(result, out)
    write_manifest(out / "manifest.txt", _run_config(args), __version__, dataset_hash(args.data))
    print(f"{len(table)} input strides -> {len(ready)} {definition.value} strides in {out}")


def cmd_train(args):
    _, _, strides, definition = _load_inputs(args)
    net, cfg = NETWORKS[args.net], _train_config(args)
    out = Path(args.out)
    patients = sorted({s.patient_id for s in strides})
    test = frozenset()
    if args.holdout_folds:
        split_ss = np.random.SeedSequence(args.seed).spawn(1)[0]
        split = patientwise_kfold(patients, args.holdout_folds, np.random.default_rng(split_ss))[0]
        test = split.test_patients
    train_set = [s for s in strides if s.patient_id not in test]
    params, log = train(train_set, cfg, net)
    save_params(out / "params.bin", params, net)
    atomic_write_text(out / "train_log.csv", train_log_csv(log))
    rows = "".join(f"{p},{'test' if p in test else 'train'}\n" for p in patients)
    atomic_write_text(out / "split.csv", "patient_id,role\n" + rows)
    write_manifest(out / "manifest.txt", _run_config(args, net, cfg), __version__, dataset_hash(args.data))
    last = log[-1]
    print(f"trained on {len(train_set)} strides; final training loss {last.loss:.4f}, "
          f"precision {last.precision_cm:.2f} cm")


def _read_split(path):
    with open(path, newline="") as fh:
        return {row["patient_id"] for row in csv.DictReader(fh) if row["role"] == "test"}


def cmd_evaluate(args):
    _, _, strides, definition = _load_inputs(args)
    params, net = load_params(args.params)
    if args.split:
        test = _read_split(args.split)
        strides = [s for s in strides if s.patient_id in test]
    report = build_report(predict_records(params, strides, net), definition)
    out = Path(args.out)
    _write_evaluation(out, report)
    write_manifest(out / "manifest.txt", _run_config(args, net), __version__, dataset_hash(args.data))
    print(f"{definition.value}: {report.mean_accuracy:+.2f} +- {report.precision:.2f} cm "
          f"over {report.n_strides} strides")


def cmd_crossval(args):
    _, _, strides, definition = _load_inputs(args)
    net, cfg = NETWORKS[args.net], _train_config(args)
    out = Path(args.out)

    def progress(split, log, records):
        logger.info("fold %d done: final training precision %.2f cm", split.fold, log[-1].precision_cm)

    report, logs, splits = cross_validate(strides, definition, cfg, net, k=args.folds, seed=args.seed,
                                          on_fold=progress)
    _write_evaluation(out, report)
    for split, log in zip(splits, logs):
        atomic_write_text(out / f"train_log_fold{split.fold:02d}.csv", train_log_csv(log))
    rows = "".join(f"{p},{s.fold}\n" for s in splits for p in sorted(s.test_patients))
    atomic_write_text(out / "folds.csv", "patient_id,test_fold\n" + rows)
    write_manifest(out / "manifest.txt", _run_config(args, net, cfg), __version__, dataset_hash(args.data))
    print(f"{definition.value}: {report.mean_accuracy:+.2f} +- {report.precision:.2f} cm "
          f"({100 * report.relative_precision:.1f}%), CC {report.spearman_cc:.3f}")


def cmd_gradcheck(args):
    result = gradient_check(make_rng(args.seed), REDUCED_CONFIG, n_coords=args.coords, tolerance=args.tolerance)
    for name, err in result.per_tensor.items():
        print(f"{name:8s} worst relative error {err:.3e}")
    status = "PASS" if result.passed else "FAIL"
    print(f"{status}: {result.n_coords} coordinates, worst {result.worst_rel_error:.3e} at {result.worst_coord}")
    return 0 if result.passed else 1


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "crossval": cmd_crossval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:
        # --help
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except Exception as exc:
        logger.debug("pipeline error", exc_info=True)
        print(f"stridecnn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
