"""Rounds of teacher training, distillation and pseudo labelling.

After each round the student labels the unlabeled pool; per class only the
most confident portion (capped at a confidence ceiling) is kept, and those
images join the labeled target set for the next round.
"""
import numpy as np

from dualmix.config import RunConfig
from dualmix.selftrain import run_framework

config = RunConfig(seed=0, n_source=60, n_target=6, n_unlabeled=30, n_val=20, iters=120,
                   base_lr=1e-3, rounds=2, out_dir="unused")
result = run_framework(config)

for report, outcome in zip(result.reports, result.outcomes):
    print(f"round {report.round}: labeled set {report.labeled_size} images")
    for who in ("teacher_rl", "teacher_sl", "ensemble", "student"):
        print(f"  {who:<10} mIoU {getattr(report, who).miou:.3f}")
    thresholds = np.array2string(outcome.pseudo.thresholds, precision=3)
    print(f"  pseudo labels: coverage {report.pseudo_coverage:.2%}, per-class thresholds {thresholds}")
