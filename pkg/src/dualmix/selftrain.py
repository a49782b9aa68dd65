"""Pseudo labels, labeled-set updates and the iterative training loop.

Each round trains both mixed-data teachers on the source set plus the current
labeled target set, distils their ensemble into a student, lets the student
pseudo-label the unlabeled pool and folds those labels into the labeled set
for the next round.  The vanilla self-training comparison shares round one
and afterwards only retrains the student on its own pseudo labels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .distill import (KDWeights, TrainSchedule, ensemble_probs, evaluate, train_student,
                      train_supervised, train_teacher)
from .domainmix import compute_lab_stats, style_transfer_samples
from .metrics import confusion_from_maps, miou, per_class_iou
from .segnet import ModelParams, predict_probs, save_checkpoint
from .synthdata import (IGNORE, DatasetBundle, ImageSample, build_splits, load_bundle, stack_images,
                        write_dataset)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# pseudo labels
# --------------------------------------------------------------------------

@dataclass
class PseudoLabeledSet:
    samples: list[ImageSample]  # labels hold the pseudo label map, 255 where unselected
    confidence: np.ndarray  # N x H x W
    prediction: np.ndarray  # N x H x W argmax, before selection
    thresholds: np.ndarray  # per class; NaN marks a class nobody predicted
    portion: float = 0.5
    ceiling: float = 0.9

    @property
    def selected_counts(self) -> np.ndarray:
        return np.array([int((s.labels != IGNORE).sum()) for s in self.samples])

    @property
    def coverage(self) -> float:
        if not self.samples:
            return 0.0
        return float(self.selected_counts.sum() / self.confidence.size)


def class_thresholds(confidence: np.ndarray, prediction: np.ndarray, num_classes: int,
                     portion: float = 0.5, ceiling: float = 0.9) -> np.ndarray:
    """Per-class cut: the k-th largest confidence, k = ceil(portion * n_c), capped at ``ceiling``."""
    conf = confidence.ravel()
    pred = prediction.ravel()
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        vals = conf[pred == c]
        n = vals.size
        if n == 0:
            continue
        k = min(n, max(1, math.ceil(round(portion * n, 9))))
        kth_largest = np.partition(vals, n - k)[n - k]
        out[c] = min(float(kth_largest), ceiling)
    return out


def select_pixels(confidence: np.ndarray, prediction: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Pseudo label map: the predicted class where confidence clears its threshold, else 255."""
    theta = thresholds[prediction]
    keep = ~np.isnan(theta) & (confidence >= theta)
    return np.where(keep, prediction, IGNORE).astype(np.uint8)


def pseudo_label_from_probs(probs: np.ndarray, unlabeled: Sequence[ImageSample],
                            portion: float = 0.5, ceiling: float = 0.9) -> PseudoLabeledSet:
    confidence = probs.max(axis=1)
    prediction = probs.argmax(axis=1)
    thresholds = class_thresholds(confidence, prediction, probs.shape[1], portion, ceiling)
    labels = select_pixels(confidence, prediction, thresholds)
    samples = [ImageSample(s.rgb, lab, "target", s.sample_id) for s, lab in zip(unlabeled, labels)]
    return PseudoLabeledSet(samples, confidence, prediction, thresholds, portion, ceiling)


def generate_pseudo_labels(student: ModelParams, unlabeled: Sequence[ImageSample],
                           portion: float = 0.5, ceiling: float = 0.9) -> PseudoLabeledSet:
    if not unlabeled:
        raise ValueError("no unlabeled images to pseudo-label")
    probs = predict_probs(student, stack_images(unlabeled))
    return pseudo_label_from_probs(probs, unlabeled, portion, ceiling)


@dataclass
class LabeledTargetSet:
    genuine: list[ImageSample]
    pseudo: list[ImageSample] = field(default_factory=list)

    @property
    def samples(self) -> list[ImageSample]:
        return self.genuine + self.pseudo

    def is_pseudo(self, sample_id: int) -> bool:
        return any(s.sample_id == sample_id for s in self.pseudo)

    def __len__(self):
        return len(self.genuine) + len(self.pseudo)


def merge_into_labeled(labeled, pseudo: PseudoLabeledSet | Sequence[ImageSample]) -> LabeledTargetSet:
    """Genuine entries plus the newest pseudo-labeled copies (older pseudo entries are replaced)."""
    genuine = list(labeled.genuine if isinstance(labeled, LabeledTargetSet) else labeled)
    new = list(pseudo.samples if isinstance(pseudo, PseudoLabeledSet) else pseudo)
    genuine_ids = {s.sample_id for s in genuine}
    clash = genuine_ids.intersection(s.sample_id for s in new)
    if clash:
        raise ValueError(f"pseudo-labeled ids collide with genuine labels: {sorted(clash)[:5]}")
    if len({s.sample_id for s in new}) != len(new):
        raise ValueError("duplicate ids in the pseudo-labeled set")
    return LabeledTargetSet(genuine, new)


# --------------------------------------------------------------------------
# rounds
# --------------------------------------------------------------------------

@dataclass
class ModelScore:
    miou: float
    per_class: list[float | None]


@dataclass
class RoundReport:
    round: int
    teacher_rl: ModelScore
    teacher_sl: ModelScore
    ensemble: ModelScore
    student: ModelScore
    pseudo_coverage: float
    labeled_size: int
    final_losses: dict[str, float] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        d = dict(d)
        for key in ("teacher_rl", "teacher_sl", "ensemble", "student"):
            d[key] = ModelScore(**d[key])
        return cls(**d)


@dataclass
class RoundOutcome:
    report: RoundReport
    teachers: tuple[ModelParams, ModelParams]
    student: ModelParams
    pseudo: PseudoLabeledSet
    labeled_next: LabeledTargetSet


@dataclass
class PreparedData:
    bundle: DatasetBundle
    source: list[ImageSample]  # possibly recoloured towards the target domain


class StageError(RuntimeError):
    def __init__(self, stage: str, round_index: int, cause: Exception):
        super().__init__(f"round {round_index}, stage {stage!r} failed: {cause}")
        self.stage = stage
        self.round_index = round_index


def score(cm) -> ModelScore:
    ious = per_class_iou(cm)
    return ModelScore(miou(cm), [None if np.isnan(v) else float(v) for v in ious])


def stage_seed(master: int, round_index: int, stage: str) -> int:
    tag = sum(ord(ch) * 131 ** i for i, ch in enumerate(stage)) % (1 << 32)
    return int(np.random.SeedSequence([master, round_index, tag]).generate_state(1, dtype=np.uint64)[0])


def schedule_for(config: RunConfig, round_index: int, stage: str) -> TrainSchedule:
    return TrainSchedule(total_iters=config.iters, base_lr=config.base_lr, momentum=config.momentum,
                         weight_decay=config.weight_decay, poly_power=config.poly_power,
                         eval_every=config.eval_every, batch_size=config.batch_size,
                         rng_seed=stage_seed(config.seed, round_index, stage))


def prepare_data(config: RunConfig, bundle: DatasetBundle | None = None) -> PreparedData:
    if bundle is None:
        if config.data_dir is not None:
            bundle = load_bundle(config.data_dir, config.dataset_config())
        else:
            bundle = build_splits(config.dataset_config())
    source = bundle.source_labeled
    if config.style_transfer:
        stats = compute_lab_stats([s.rgb for s in bundle.target_labeled + bundle.target_unlabeled])
        source = style_transfer_samples(source, stats)
    return PreparedData(bundle, source)


def ensemble_score(teachers, val) -> ModelScore:
    probs = ensemble_probs(teachers, stack_images(val))
    return score(confusion_from_maps(teachers[0].num_classes, probs.argmax(axis=1), [s.labels for s in val]))


def _save(params: ModelParams, out_dir, name: str, checkpoints: dict) -> None:
    if out_dir is None:
        return
    path = Path(out_dir) / name
    save_checkpoint(params, path)
    checkpoints[params.role] = str(path.name)


def train_round_teachers(config: RunConfig, data: PreparedData, labeled: LabeledTargetSet,
                         round_index: int, previous=None) -> tuple[ModelParams, ModelParams, dict]:
    losses = {}
    teachers = []
    for i, role in enumerate(("RL", "SL")):
        init = None if config.reinit_teachers or previous is None else previous[i]
        try:
            res = train_teacher(role, data.source, labeled.samples,
                                schedule_for(config, round_index, f"teacher_{role}"),
                                num_classes=data.bundle.num_classes, init=init)
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
            raise StageError(f"teacher_{role}", round_index, exc) from exc
        losses[f"teacher_{role}"] = float(res.losses[-1])
        teachers.append(res.params)
    return teachers[0], teachers[1], losses


def run_round(config: RunConfig, data: PreparedData, labeled: LabeledTargetSet, round_index: int,
              out_dir=None, previous_teachers=None) -> RoundOutcome:
    """One pass of teachers -> student -> pseudo labels; depends only on its arguments."""
    bundle = data.bundle
    val = bundle.target_val
    log.info("round %d: training teachers on %d labeled target images", round_index, len(labeled))
    rl, sl, losses = train_round_teachers(config, data, labeled, round_index, previous_teachers)

    ce_set = labeled.samples if config.student_ce_data == "augmented" else labeled.genuine
    log.info("round %d: distilling student", round_index)
    try:
        soft = ensemble_probs([rl, sl], stack_images(bundle.target_unlabeled))
        init = {"random": None, "teacher_SL": sl, "teacher_RL": rl}[config.student_init]
        res = train_student([rl, sl], ce_set, bundle.target_unlabeled,
                            schedule_for(config, round_index, "student"),
                            KDWeights(config.lambda_kl, config.lambda_ce), soft_targets=soft, init=init)
    except Exception as exc:  # noqa: BLE001
        raise StageError("student", round_index, exc) from exc
    student = res.params
    losses["student"] = float(res.losses[-1])

    try:
        pseudo = generate_pseudo_labels(student, bundle.target_unlabeled,
                                        config.pseudo_portion, config.pseudo_threshold)
    except Exception as exc:  # noqa: BLE001
        raise StageError("pseudo_labels", round_index, exc) from exc
    labeled_next = merge_into_labeled(labeled, pseudo)

    checkpoints: dict[str, str] = {}
    _save(rl, out_dir, f"round{round_index}_teacher_RL.dmck", checkpoints)
    _save(sl, out_dir, f"round{round_index}_teacher_SL.dmck", checkpoints)
    _save(student, out_dir, f"round{round_index}_student.dmck", checkpoints)
    if out_dir is not None:
        write_dataset(pseudo.samples, Path(out_dir) / f"round{round_index}_unlabeled.pseudo.dmx",
                      bundle.num_classes)

    report = RoundReport(
        round=round_index,
        teacher_rl=score(evaluate(rl, val)),
        teacher_sl=score(evaluate(sl, val)),
        ensemble=ensemble_score([rl, sl], val),
        student=score(evaluate(student, val)),
        pseudo_coverage=pseudo.coverage,
        labeled_size=len(ce_set),
        final_losses=losses,
        checkpoints=checkpoints,
    )
    log.info("round %d: RL %.4f SL %.4f ens %.4f student %.4f", round_index, report.teacher_rl.miou,
             report.teacher_sl.miou, report.ensemble.miou, report.student.miou)
    return RoundOutcome(report, (rl, sl), student, pseudo, labeled_next)


@dataclass
class RunResult:
    reports: list[RoundReport]
    final_student: ModelParams
    outcomes: list[RoundOutcome]
    data: PreparedData
    baseline: ModelScore | None = None


def train_source_only(config: RunConfig, data: PreparedData) -> tuple[ModelParams, ModelScore]:
    """CE on the untranslated source images only; the no-adaptation reference."""
    res = train_supervised(data.bundle.source_labeled, schedule_for(config, 0, "source_only"),
                           num_classes=data.bundle.num_classes)
    return res.params, score(evaluate(res.params, data.bundle.target_val))


def run_framework(config: RunConfig, data: PreparedData | None = None, out_dir=None) -> RunResult:
    if config.rounds < 1:
        raise ValueError("rounds must be >= 1")
    data = data if data is not None else prepare_data(config)
    labeled = LabeledTargetSet(list(data.bundle.target_labeled))
    outcomes = []
    for r in range(1, config.rounds + 1):
        prev = outcomes[-1].teachers if outcomes else None
        outcome = run_round(config, data, labeled, r, out_dir, prev)
        outcomes.append(outcome)
        labeled = outcome.labeled_next
    return RunResult([o.report for o in outcomes], outcomes[-1].student, outcomes, data)


def run_vanilla_self_training(config: RunConfig, data: PreparedData | None = None, out_dir=None,
                              first_round: RoundOutcome | None = None) -> RunResult:
    """Round one as in the framework, then the student retrains on its own pseudo labels."""
    if config.rounds < 1:
        raise ValueError("rounds must be >= 1")
    data = data if data is not None else prepare_data(config)
    bundle = data.bundle
    if first_round is None:
        first_round = run_round(config, data, LabeledTargetSet(list(bundle.target_labeled)), 1, out_dir)
    outcomes = [first_round]
    reports = [first_round.report]
    teachers = first_round.teachers
    student = first_round.student
    labeled = first_round.labeled_next
    for r in range(2, config.rounds + 1):
        log.info("vanilla round %d: retraining student on %d labeled images", r, len(labeled))
        try:
            res = train_supervised(labeled.samples, schedule_for(config, r, "vanilla_student"),
                                   num_classes=bundle.num_classes, init=student, role="student")
        except Exception as exc:  # noqa: BLE001
            raise StageError("vanilla_student", r, exc) from exc
        student = res.params
        pseudo = generate_pseudo_labels(student, bundle.target_unlabeled,
                                        config.pseudo_portion, config.pseudo_threshold)
        checkpoints: dict[str, str] = {}
        _save(student, out_dir, f"round{r}_student.dmck", checkpoints)
        prev = reports[-1]
        report = RoundReport(r, prev.teacher_rl, prev.teacher_sl, prev.ensemble,
                             score(evaluate(student, bundle.target_val)), pseudo.coverage,
                             len(labeled), {"student": float(res.losses[-1])}, checkpoints)
        reports.append(report)
        outcomes.append(RoundOutcome(report, teachers, student, pseudo, merge_into_labeled(labeled, pseudo)))
        labeled = outcomes[-1].labeled_next
    return RunResult(reports, student, outcomes, data)
