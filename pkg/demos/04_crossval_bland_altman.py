"""Patient-wise cross-validation with a Bland-Altman export.

Short training runs keep this under a few minutes; the numbers are
therefore rougher than a full 4000-iteration evaluation.
"""
import pathlib
import sys

from stridecnn.data import atomic_write_text, generate_synthetic
from stridecnn.evaluation import bland_altman_csv, bland_altman_svg, cross_validate, report_csv
from stridecnn.network import DESK_CONFIG
from stridecnn.preprocessing import preprocess
from stridecnn.tensor import make_rng
from stridecnn.training import TrainConfig

out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "crossval_demo")
table = generate_synthetic(n_patients=20, strides_per_patient=10, rng=make_rng(2))
strides = preprocess(table.strides, "msdtw")
report, logs, splits = cross_validate(strides, "msdtw", TrainConfig(iterations=500), DESK_CONFIG, k=5, seed=2,
                                      on_fold=lambda split, *_: print(f"fold {split.fold} done"))

ba = report.bland_altman
print(f"{report.n_strides} strides from {report.n_patients} patients")
print(f"accuracy {report.mean_accuracy:+.2f} cm, precision {report.precision:.2f} cm, "
      f"Spearman {report.spearman_cc:.3f}")
print(f"limits of agreement [{ba.lower:.2f}, {ba.upper:.2f}] cm")
atomic_write_text(out / "report.csv", report_csv(report))
atomic_write_text(out / "bland_altman.csv", bland_altman_csv(report))
atomic_write_text(out / "bland_altman.svg", bland_altman_svg(report))
print(f"wrote {out}/report.csv, bland_altman.csv, bland_altman.svg")
