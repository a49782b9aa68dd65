"""Two mixing teachers distilled into one student on a tiny problem.

The region-level teacher trains on region-mixed images, the sample-level
teacher on source/target pairs. The student matches the averaged teacher
softmax on unlabeled images (KL) while fitting the labeled target images (CE).
Iteration counts are far below the real benchmark so this runs in about a minute.
"""
from dualmix.distill import KDWeights, TrainSchedule, evaluate, train_student, train_teacher
from dualmix.metrics import miou
from dualmix.selftrain import ensemble_score
from dualmix.synthdata import DatasetConfig, build_splits

bundle = build_splits(DatasetConfig(n_source=60, n_target=6, n_unlabeled=30, n_val=20, seed=2))
schedule = TrainSchedule(total_iters=150, base_lr=1e-3, rng_seed=0)

teachers = {}
for role in ("RL", "SL"):
    res = train_teacher(role, bundle.source_labeled, bundle.target_labeled, schedule)
    teachers[role] = res.params
    print(f"teacher {role}: final loss {res.losses[-5:].mean():.3f}, "
          f"val mIoU {miou(evaluate(res.params, bundle.target_val)):.3f}")

print(f"ensemble of both teachers: val mIoU {ensemble_score(list(teachers.values()), bundle.target_val).miou:.3f}")

student = train_student(list(teachers.values()), bundle.target_labeled, bundle.target_unlabeled,
                        TrainSchedule(total_iters=150, base_lr=1e-3, rng_seed=1), KDWeights(0.5, 1.0),
                        init=teachers["SL"].copy())
print(f"student: val mIoU {miou(evaluate(student.params, bundle.target_val)):.3f}")
for name, values in student.parts.items():
    print(f"  mean {name} over the last 20 steps: {values[-20:].mean():.4f}")
