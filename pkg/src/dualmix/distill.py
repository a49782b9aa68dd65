"""Teacher and student training stages.

* region-level teacher: CE on a source rectangle pasted into a target image
* sample-level teacher: CE(source) + CE(target), one image of each per step
* student: lambda_kl * KL(ensemble || student) on unlabeled target images
  plus lambda_ce * CE on labeled target images

The two teachers are combined by averaging their softmax outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (OptimizerState, Tape, Tensor, add, cross_entropy_loss,
                       kl_divergence_loss, scale, sgd_step, softmax)
from .domainmix import region_mix, sample_mask
from .metrics import ConfusionMatrix, accumulate, miou
from .segnet import ModelParams, forward, init_model, predict_labels, predict_probs
from .synthdata import NUM_CLASSES, ImageSample, stack_images


@dataclass
class TrainSchedule:
    total_iters: int = 8000
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    eval_every: int = 0
    rng_seed: int = 0
    batch_size: int = 1

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(base_lr=self.base_lr, momentum=self.momentum,
                              weight_decay=self.weight_decay, power=self.poly_power,
                              max_iter=self.total_iters)

    def seeds(self) -> tuple[int, int]:
        """(init seed, sampling seed) derived from rng_seed."""
        a, b = np.random.SeedSequence(self.rng_seed).generate_state(2, dtype=np.uint64)
        return int(a), int(b)


@dataclass
class KDWeights:
    lambda_kl: float = 0.5
    lambda_ce: float = 1.0

    def __post_init__(self):
        if self.lambda_kl < 0 or self.lambda_ce < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainResult:
    params: ModelParams
    losses: np.ndarray
    evals: list[tuple[int, float]] = field(default_factory=list)
    parts: dict[str, np.ndarray] = field(default_factory=dict)


def evaluate(params: ModelParams, samples: Sequence[ImageSample], batch_size: int = 50) -> ConfusionMatrix:
    cm = ConfusionMatrix(params.num_classes)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        preds = predict_labels(params, stack_images(chunk))
        for p, s in zip(preds, chunk):
            accumulate(cm, p, s.labels)
    return cm


def _miou(params, val):
    return miou(evaluate(params, val))


def _as_batch(samples):
    if len(samples) == 1:
        return samples[0].image_tensor(), samples[0].labels
    return np.stack([s.image_tensor() for s in samples]), np.stack([s.labels for s in samples])


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def loss_region_teacher(params: ModelParams, mixed) -> Tensor:
    return cross_entropy_loss(forward(params, mixed.image_tensor()), mixed.labels)


def loss_sample_teacher(params: ModelParams, source: ImageSample, target: ImageSample) -> Tensor:
    ls = cross_entropy_loss(forward(params, source.image_tensor()), source.labels)
    lt = cross_entropy_loss(forward(params, target.image_tensor()), target.labels)
    return add(ls, lt)


def ensemble_predict(params_rl: ModelParams, params_sl: ModelParams, image) -> np.ndarray:
    """Mean of the two teachers' softmax maps (CxHxW or NxCxHxW)."""
    if params_rl.num_classes != params_sl.num_classes:
        raise ValueError("teachers disagree on the number of classes")
    x = Tensor(image)
    p1 = softmax(forward(params_rl.frozen(), x).data, axis=-3)
    p2 = softmax(forward(params_sl.frozen(), x).data, axis=-3)
    return (p1 + p2) / 2


def ensemble_probs(teachers: Sequence[ModelParams], images: np.ndarray) -> np.ndarray:
    """Batched ensemble over an N x 3 x H x W stack (any number of teachers)."""
    probs = [predict_probs(t, images) for t in teachers]
    if len({p.shape[1] for p in probs}) != 1:
        raise ValueError("teachers disagree on the number of classes")
    return sum(probs) / len(probs)


def student_loss_terms(params: ModelParams, target_probs, unlabeled_image, labeled_image, labels,
                       weights: KDWeights) -> tuple[Tensor, Tensor, Tensor]:
    """(total, KL term, CE term) with the weights already applied."""
    kl = kl_divergence_loss(target_probs, forward(params, unlabeled_image))
    ce = cross_entropy_loss(forward(params, labeled_image), labels)
    kl_w = scale(kl, weights.lambda_kl)
    ce_w = scale(ce, weights.lambda_ce)
    return add(kl_w, ce_w), kl_w, ce_w


def loss_student(params: ModelParams, teachers: Sequence[ModelParams], unlabeled_image,
                 labeled: tuple[np.ndarray, np.ndarray], weights: KDWeights = KDWeights()) -> Tensor:
    rl, sl = teachers
    target = ensemble_predict(rl, sl, unlabeled_image)
    total, _, _ = student_loss_terms(params, target, unlabeled_image, labeled[0], labeled[1], weights)
    return total


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def _step(params, loss, tape, opt):
    grads = tape.backward(loss, params)
    sgd_step(params, grads, opt)


def _maybe_eval(res, params, it, schedule, val):
    if val and schedule.eval_every and (it + 1) % schedule.eval_every == 0:
        res.evals.append((it + 1, _miou(params, val)))


def train_teacher(role: str, source_set: Sequence[ImageSample], target_set: Sequence[ImageSample],
                  schedule: TrainSchedule, val: Sequence[ImageSample] | None = None,
                  num_classes: int = NUM_CLASSES, init: ModelParams | None = None) -> TrainResult:
    """Train a region-level ("RL") or sample-level ("SL") teacher, from scratch unless ``init`` is given."""
    if role not in ("RL", "SL"):
        raise ValueError(f"role must be 'RL' or 'SL', got {role!r}")
    if not source_set or not target_set:
        raise ValueError("teacher training needs non-empty source and target sets")
    init_seed, draw_seed = schedule.seeds()
    tag = "teacher_RL" if role == "RL" else "teacher_SL"
    params = init.copy(tag) if init is not None else init_model(init_seed, num_classes, role=tag)
    opt = schedule.optimizer()
    rng = np.random.default_rng(draw_seed)
    losses = np.empty(schedule.total_iters, dtype=np.float64)
    res = TrainResult(params, losses)
    h, w = source_set[0].labels.shape
    bs = schedule.batch_size
    for it in range(schedule.total_iters):
        src = [source_set[i] for i in rng.integers(len(source_set), size=bs)]
        tgt = [target_set[i] for i in rng.integers(len(target_set), size=bs)]
        with Tape() as tape:
            if role == "RL":
                mixed = [region_mix(t, s, sample_mask(int(rng.integers(2 ** 63)), h, w))
                         for t, s in zip(tgt, src)]
                x, y = _as_batch(mixed)
                loss = cross_entropy_loss(forward(params, x), y)
            else:
                xs, ys = _as_batch(src)
                xt, yt = _as_batch(tgt)
                loss = add(cross_entropy_loss(forward(params, xs), ys),
                           cross_entropy_loss(forward(params, xt), yt))
        losses[it] = float(loss.data)
        _step(params, loss, tape, opt)
        _maybe_eval(res, params, it, schedule, val)
    return res


def train_supervised(train_set: Sequence[ImageSample], schedule: TrainSchedule, num_classes: int = NUM_CLASSES,
                     val: Sequence[ImageSample] | None = None, init: ModelParams | None = None,
                     role: str = "student") -> TrainResult:
    """Plain CE training on one labeled set (source-only baseline, self-training)."""
    if not train_set:
        raise ValueError("empty training set")
    init_seed, draw_seed = schedule.seeds()
    params = init.copy(role) if init is not None else init_model(init_seed, num_classes, role=role)
    opt = schedule.optimizer()
    rng = np.random.default_rng(draw_seed)
    res = TrainResult(params, np.empty(schedule.total_iters))
    for it in range(schedule.total_iters):
        x, y = _as_batch([train_set[i] for i in rng.integers(len(train_set), size=schedule.batch_size)])
        with Tape() as tape:
            loss = cross_entropy_loss(forward(params, x), y)
        res.losses[it] = float(loss.data)
        _step(params, loss, tape, opt)
        _maybe_eval(res, params, it, schedule, val)
    return res


def train_student(teachers: Sequence[ModelParams], target_set: Sequence[ImageSample],
                  unlabeled_set: Sequence[ImageSample], schedule: TrainSchedule,
                  weights: KDWeights = KDWeights(), val: Sequence[ImageSample] | None = None,
                  soft_targets: np.ndarray | None = None, init: ModelParams | None = None) -> TrainResult:
    """Distil the teacher ensemble into a student.

    The student starts from ``init`` (copied) or a fresh random draw.
    Teachers are frozen, so their ensemble over the unlabeled images is
    computed once up front (or passed in as ``soft_targets``).
    """
    if not unlabeled_set:
        raise ValueError("the distillation term needs at least one unlabeled image")
    if not target_set:
        raise ValueError("empty labeled target set")
    num_classes = teachers[0].num_classes
    if soft_targets is None:
        soft_targets = ensemble_probs(teachers, stack_images(unlabeled_set))
    init_seed, draw_seed = schedule.seeds()
    params = init.copy("student") if init is not None else init_model(init_seed, num_classes, role="student")
    opt = schedule.optimizer()
    rng = np.random.default_rng(draw_seed)
    n = schedule.total_iters
    res = TrainResult(params, np.empty(n), parts={"kl": np.empty(n), "ce": np.empty(n)})
    bs = schedule.batch_size
    for it in range(n):
        ui = rng.integers(len(unlabeled_set), size=bs)
        ti = rng.integers(len(target_set), size=bs)
        xu, _ = _as_batch([unlabeled_set[i] for i in ui])
        pt = soft_targets[ui[0]] if bs == 1 else soft_targets[ui]
        xt, yt = _as_batch([target_set[i] for i in ti])
        with Tape() as tape:
            loss, kl, ce = student_loss_terms(params, pt, xu, xt, yt, weights)
        res.losses[it] = float(loss.data)
        res.parts["kl"][it] = float(kl.data)
        res.parts["ce"][it] = float(ce.data)
        _step(params, loss, tape, opt)
        _maybe_eval(res, params, it, schedule, val)
    return res
