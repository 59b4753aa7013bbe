"""Patient-wise cross-validation and agreement statistics.

All statistics are unit agnostic; the pipeline feeds them centimetres.
Standard deviations use the ``n - 1`` denominator.
"""

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .network import predict
from .preprocessing import StrideDefinition
from .training import stack_inputs, train

logger = logging.getLogger(__name__)

__all__ = [
    "FoldSplit",
    "PredictionRecord",
    "BlandAltman",
    "EvaluationReport",
    "DegenerateInputError",
    "LeakageError",
    "patientwise_kfold",
    "records_from_arrays",
    "signed_error_stats",
    "relative_precision",
    "abs_error_stats",
    "spearman_cc",
    "bland_altman",
    "error_regression",
    "per_patient_precision",
    "build_report",
    "predict_records",
    "cross_validate",
    "report_csv",
    "per_patient_csv",
    "predictions_csv",
    "bland_altman_csv",
    "bland_altman_svg",
]


class DegenerateInputError(ValueError):
    """The statistic is undefined for this input (e.g. zero variance)."""


class LeakageError(AssertionError):
    """A test stride's patient also appears in its fold's training set."""


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_patients: frozenset
    test_patients: frozenset


@dataclass(frozen=True)
class PredictionRecord:
    patient_id: str
    definition: StrideDefinition
    y: float
    y_ref: float
    fold: int = 0
    stride_id: str = ""


def patientwise_kfold(patient_ids, k, rng):
    """Shuffle the distinct patients once and deal them into ``k`` test groups.

    Group sizes differ by at most one; larger groups come first.
    """
    patients = sorted(set(patient_ids))
    if k < 2:
        raise ValueError(f"need at least 2 folds to hold out data, got k={k}")
    if len(patients) < k:
        raise ValueError(f"{len(patients)} patients cannot fill {k} folds")
    order = rng.permutation(len(patients))
    shuffled = [patients[i] for i in order]
    everyone = frozenset(patients)
    splits = []
    for fold, chunk in enumerate(np.array_split(np.arange(len(shuffled)), k)):
        test = frozenset(shuffled[i] for i in chunk)
        splits.append(FoldSplit(fold, everyone - test, test))
    return splits


def records_from_arrays(y, y_ref, patient_ids=None, definition=StrideDefinition.MSDTW):
    y = np.asarray(y, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if patient_ids is None:
        patient_ids = ["P0"] * y.size
    return [PredictionRecord(str(p), definition, float(a), float(b))
            for p, a, b in zip(patient_ids, y, y_ref)]


def _pairs(records):
    if len(records) == 0:
        raise ValueError("no prediction records")
    y = np.array([r.y for r in records], dtype=np.float64)
    y_ref = np.array([r.y_ref for r in records], dtype=np.float64)
    return y, y_ref


def _mean_std(values):
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return mean, std


def signed_error_stats(records):
    """Mean accuracy and precision (mean and sample std of ``y - y_ref``)."""
    y, y_ref = _pairs(records)
    return _mean_std(y - y_ref)


def relative_precision(records):
    """Precision divided by the mean reference length."""
    y, y_ref = _pairs(records)
    mean_ref = float(np.mean(y_ref))
    if not mean_ref > 0:
        raise DegenerateInputError(f"mean reference length {mean_ref} is not positive")
    return _mean_std(y - y_ref)[1] / mean_ref


def abs_error_stats(records):
    y, y_ref = _pairs(records)
    return _mean_std(np.abs(y - y_ref))


def spearman_cc(y, y_ref):
    """Spearman rank correlation with average ranks for ties."""
    y = np.asarray(y, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if y.shape != y_ref.shape or y.ndim != 1:
        raise ValueError("spearman_cc needs two 1-D arrays of equal length")
    if y.size < 2:
        raise DegenerateInputError("spearman_cc needs at least two pairs")
    ra = rankdata(y) - (y.size + 1) / 2.0
    rb = rankdata(y_ref) - (y.size + 1) / 2.0
    denom = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if denom == 0.0:
        raise DegenerateInputError("spearman_cc is undefined when all ranks are tied")
    return float(np.dot(ra, rb) / denom)


@dataclass
class BlandAltman:
    agreement: np.ndarray
    difference: np.ndarray
    mean: float
    lower: float
    upper: float


def bland_altman(records):
    """Agreement/difference points with ``mean +- 1.96 sd`` limits."""
    y, y_ref = _pairs(records)
    diff = y - y_ref
    mean, std = _mean_std(diff)
    return BlandAltman(agreement=0.5 * (y + y_ref), difference=diff,
                       mean=mean, lower=mean - 1.96 * std, upper=mean + 1.96 * std)


def error_regression(records):
    """Least-squares line of ``y - y_ref`` against ``(y + y_ref) / 2``."""
    ba = bland_altman(records)
    a = ba.agreement
    da = a - a.mean()
    sxx = float(np.dot(da, da))
    if a.size < 2 or sxx == 0.0:
        raise DegenerateInputError("regression needs at least two distinct agreement values")
    slope = float(np.dot(da, ba.difference - ba.difference.mean()) / sxx)
    intercept = float(ba.difference.mean() - slope * a.mean())
    return slope, intercept


def per_patient_precision(records):
    """``{patient_id: (n_strides, mean_accuracy, precision)}`` over pooled records."""
    groups = {}
    for r in records:
        groups.setdefault(r.patient_id, []).append(r)
    out = {}
    for pid in sorted(groups):
        recs = groups[pid]
        e = np.array([r.y - r.y_ref for r in recs])
        acc = float(np.mean(e))
        prec = float(np.std(e, ddof=1)) if e.size > 1 else float("nan")
        out[pid] = (len(recs), acc, prec)
    return out


@dataclass
class EvaluationReport:
    definition: StrideDefinition
    n_strides: int
    n_patients: int
    mean_ours: float
    mean_ref: float
    mean_accuracy: float
    precision: float
    relative_precision: float
    mean_abs_accuracy: float
    abs_precision: float
    spearman_cc: float
    regression_slope: float
    regression_intercept: float
    bland_altman: BlandAltman
    per_patient: dict
    records: list = field(repr=False, default_factory=list)

    def patient_precision_extremes(self):
        """``(best_patient, best_precision, worst_patient, worst_precision)``."""
        valid = {p: v[2] for p, v in self.per_patient.items() if np.isfinite(v[2])}
        if not valid:
            return None
        best = min(valid, key=lambda p: (valid[p], p))
        worst = max(valid, key=lambda p: (valid[p], p))
        return best, valid[best], worst, valid[worst]


def build_report(records, definition=None):
    y, y_ref = _pairs(records)
    if definition is None:
        definition = records[0].definition
    acc, prec = signed_error_stats(records)
    abs_acc, abs_prec = abs_error_stats(records)
    try:
        slope, intercept = error_regression(records)
    except DegenerateInputError:
        slope, intercept = float("nan"), float("nan")
    try:
        cc = spearman_cc(y, y_ref)
    except DegenerateInputError:
        cc = float("nan")
    per_patient = per_patient_precision(records)
    return EvaluationReport(
        definition=definition, n_strides=len(records), n_patients=len(per_patient),
        mean_ours=float(np.mean(y)), mean_ref=float(np.mean(y_ref)),
        mean_accuracy=acc, precision=prec, relative_precision=relative_precision(records),
        mean_abs_accuracy=abs_acc, abs_precision=abs_prec, spearman_cc=cc,
        regression_slope=slope, regression_intercept=intercept,
        bland_altman=bland_altman(records), per_patient=per_patient, records=list(records),
    )


def predict_records(params, strides, net_config, fold=0):
    x, y_ref = stack_inputs(strides)
    y = predict(params, x, net_config)
    return [PredictionRecord(s.patient_id, s.definition, float(a), float(b), fold, s.stride_id)
            for s, a, b in zip(strides, y, y_ref)]


def fold_seeds(seed, k):
    """Independent seeds for the split and for each fold's training run."""
    ss = np.random.SeedSequence(seed)
    split_ss, *fold_ss = ss.spawn(k + 1)
    return split_ss, fold_ss


def cross_validate(dataset, definition, train_config, net_config, k=10, seed=None, on_fold=None):
    """Patient-wise k-fold cross-validation with pooled statistics.

    One network is trained per fold on the other folds' patients and
    predicts the held-out patients' strides. Predictions of all folds are
    pooled before any statistic is computed.

    Returns
    -------
    report : EvaluationReport
    logs : list of per-fold training logs
    splits : list of FoldSplit
    """
    definition = StrideDefinition.parse(definition)
    seed = train_config.seed if seed is None else seed
    wrong = {s.definition for s in dataset} - {definition}
    if wrong:
        raise ValueError(f"dataset contains strides of other definitions: {sorted(d.value for d in wrong)}")
    split_ss, fold_ss = fold_seeds(seed, k)
    splits = patientwise_kfold([s.patient_id for s in dataset], k, np.random.default_rng(split_ss))

    records, logs = [], []
    for split, ss in zip(splits, fold_ss):
        train_set = [s for s in dataset if s.patient_id in split.train_patients]
        test_set = [s for s in dataset if s.patient_id in split.test_patients]
        if not test_set:
            raise ValueError(f"fold {split.fold} has no test strides")
        train_patients = {s.patient_id for s in train_set}
        params, log = train(train_set, train_config, net_config, rng=np.random.default_rng(ss))
        fold_records = predict_records(params, test_set, net_config, fold=split.fold)
        for r in fold_records:
            if r.patient_id in train_patients:
                raise LeakageError(f"patient {r.patient_id} is in both train and test of fold {split.fold}")
        records.extend(fold_records)
        logs.append(log)
        logger.info("fold %d: %d train / %d test strides", split.fold, len(train_set), len(test_set))
        if on_fold is not None:
            on_fold(split, log, fold_records)
    if len(records) != len(dataset):
        raise AssertionError("every stride must be predicted exactly once")
    return build_report(records, definition), logs, splits


# -- exports -----------------------------------------------------------------

def _csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _num(v):
    return repr(float(v))


def report_csv(report):
    rows = [["statistic", "value"],
            ["definition", report.definition.value],
            ["n_strides", report.n_strides],
            ["n_patients", report.n_patients]]
    for name in ("mean_ours", "mean_ref", "mean_accuracy", "precision", "relative_precision",
                 "mean_abs_accuracy", "abs_precision", "spearman_cc",
                 "regression_slope", "regression_intercept"):
        rows.append([name, _num(getattr(report, name))])
    ba = report.bland_altman
    rows += [["limit_lower", _num(ba.lower)], ["limit_upper", _num(ba.upper)]]
    ext = report.patient_precision_extremes()
    if ext is not None:
        rows += [["best_patient", ext[0]], ["best_patient_precision", _num(ext[1])],
                 ["worst_patient", ext[2]], ["worst_patient_precision", _num(ext[3])]]
    return _csv(rows)


def per_patient_csv(report):
    rows = [["patient_id", "n_strides", "mean_accuracy", "precision"]]
    for pid, (n, acc, prec) in report.per_patient.items():
        rows.append([pid, n, _num(acc), _num(prec)])
    return _csv(rows)


def predictions_csv(records):
    rows = [["patient_id", "stride_id", "definition", "fold", "y_cm", "y_ref_cm"]]
    for r in records:
        rows.append([r.patient_id, r.stride_id, r.definition.value, r.fold, _num(r.y), _num(r.y_ref)])
    return _csv(rows)


def bland_altman_csv(report, to_m=0.01):
    ba = report.bland_altman
    rows = [["agreement_m", "difference_m"]]
    for a, d in zip(ba.agreement, ba.difference):
        rows.append([_num(a * to_m), _num(d * to_m)])
    return _csv(rows)


def bland_altman_svg(report, to_m=0.01, width=640, height=420):
    """Scatter of the Bland-Altman points with limit lines and the error regression line."""
    ba = report.bland_altman
    a = ba.agreement * to_m
    d = ba.difference * to_m
    lines_y = [ba.mean * to_m, ba.lower * to_m, ba.upper * to_m]
    x0, x1 = float(a.min()), float(a.max())
    if x1 == x0:
        x0, x1 = x0 - 0.05, x1 + 0.05
    y_all = np.concatenate([d, lines_y])
    y0, y1 = float(y_all.min()), float(y_all.max())
    if y1 == y0:
        y0, y1 = y0 - 0.05, y1 + 0.05
    padx, pady = 0.05 * (x1 - x0), 0.1 * (y1 - y0)
    x0, x1, y0, y1 = x0 - padx, x1 + padx, y0 - pady, y1 + pady
    ml, mr, mt, mb = 60, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + (y1 - v) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="white" stroke="black"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">'
           f'Bland-Altman {report.definition.value}</text>',
           f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">'
           f'(y + y_ref) / 2 [m]</text>',
           f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 16 {height / 2:.1f})">y - y_ref [m]</text>']
    for v, label in ((x0 + padx, f"{x0 + padx:.2f}"), (x1 - padx, f"{x1 - padx:.2f}")):
        out.append(f'<text x="{sx(v):.2f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">{label}</text>')
    for v, dash, label in zip(lines_y, ("", "6,4", "6,4"), ("mean", "-1.96 sd", "+1.96 sd")):
        style = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<line x1="{ml}" y1="{sy(v):.2f}" x2="{ml + pw}" y2="{sy(v):.2f}" '
                   f'stroke="gray"{style}/>')
        out.append(f'<text x="{ml + pw - 4}" y="{sy(v) - 3:.2f}" text-anchor="end" font-size="10">'
                   f'{label} {v:+.3f}</text>')
    for xa, yd in zip(a, d):
        out.append(f'<circle cx="{sx(xa):.2f}" cy="{sy(yd):.2f}" r="2.5" fill="steelblue" fill-opacity="0.6"/>')
    if np.isfinite(report.regression_slope):
        # slope is unit free; intercept scales with the unit
        b = report.regression_intercept * to_m
        m = report.regression_slope
        out.append(f'<line x1="{sx(x0):.2f}" y1="{sy(m * x0 + b):.2f}" x2="{sx(x1):.2f}" '
                   f'y2="{sy(m * x1 + b):.2f}" stroke="firebrick" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
