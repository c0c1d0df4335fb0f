"""Teacher-student training with stochastic pseudo-labels.

A teacher trained on the labeled set labels a batch of unlabeled volumes.
Each pseudo-label uses threshold 0.5 with probability ``q_t`` (else 0.7)
and is cut down to its largest component with probability ``q_c``. A
student is trained on the labeled set plus that batch, keeping its best
validation iterate. After all unlabeled batches of one iteration the teacher
is replaced by the student.
"""
from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentationSpec
from .backbone import AirwayNet
from .errors import ConfigurationError, ContractError
from .inference import predict_volume
from .postproc import largest_component, threshold_map
from .training import TrainConfig, TrainResult, cuboid_pool, train, validation_loss
from .volume import BinaryMask, Volume


@dataclass
class TeacherStudentConfig:
    q_t: float = 0.5
    q_c: float = 0.5
    n_batches: int | None = None  # None: ceil(|U| / 8)
    n_iterations: int = 2
    thresholds: tuple = (0.5, 0.7)
    student_steps: int | None = None  # None: the supervised step count

    def __post_init__(self):
        for name in ("q_t", "q_c"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.n_batches is not None and self.n_batches < 1:
            raise ConfigurationError("n_batches must be >= 1")
        if self.n_iterations < 1:
            raise ConfigurationError("n_iterations must be >= 1")
        if self.student_steps is not None and self.student_steps < 1:
            raise ConfigurationError("student_steps must be >= 1")
        if len(self.thresholds) != 2 or not all(0 < t < 1 for t in self.thresholds):
            raise ConfigurationError("thresholds must be two values in (0, 1)")

    def batches_for(self, n_unlabeled: int) -> int:
        v = self.n_batches if self.n_batches is not None else max(1, math.ceil(n_unlabeled / 8))
        if n_unlabeled and v > n_unlabeled:
            raise ConfigurationError(f"n_batches={v} exceeds the {n_unlabeled} unlabeled volumes")
        return v


@dataclass
class PseudoLabel:
    mask: BinaryMask
    threshold: float
    largest_only: bool
    empty: bool


@dataclass
class MixedItem:
    name: str
    volume: Volume
    mask: BinaryMask
    pseudo: bool


def draw_threshold(cfg: TeacherStudentConfig, rng: np.random.Generator) -> float:
    return cfg.thresholds[0] if rng.random() < cfg.q_t else cfg.thresholds[1]


def draw_largest_only(cfg: TeacherStudentConfig, rng: np.random.Generator) -> bool:
    return bool(rng.random() < cfg.q_c)


def pseudo_label_from_maps(maps, cfg: TeacherStudentConfig, rng: np.random.Generator) -> PseudoLabel:
    """Stochastic threshold and optional largest-component reduction of a confidence map."""
    t = draw_threshold(cfg, rng)
    reduce = draw_largest_only(cfg, rng)
    mask = threshold_map(maps, t)
    if reduce:
        mask = largest_component(mask)
    empty = not mask.data.any()
    if empty:
        warnings.warn("pseudo-label is empty; kept as an all-background example", stacklevel=2)
    return PseudoLabel(mask, t, reduce, empty)


def generate_pseudo_label(teacher: AirwayNet, volume: Volume, cfg: TeacherStudentConfig,
                          rng: np.random.Generator) -> PseudoLabel:
    return pseudo_label_from_maps(predict_volume(teacher, volume), cfg, rng)


def build_mixed_dataset(labeled: Sequence, pseudo: Sequence[tuple]) -> list[MixedItem]:
    """Union of labeled items and ``(unlabeled item, pseudo-label mask)`` pairs, with provenance."""
    out = [MixedItem(d.name, d.volume, d.mask, False) for d in labeled]
    for u, mask in pseudo:
        if mask is None:
            raise ContractError(f"unlabeled item {u.name!r} has no pseudo-label")
        out.append(MixedItem(u.name, u.volume, getattr(mask, "mask", mask), True))
    return out


def train_student(
    student: AirwayNet,
    mixed: Sequence[MixedItem],
    train_cfg: TrainConfig,
    val_pool: Sequence | None = None,
    aug: AugmentationSpec | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train on the mixed set; with ``val_pool`` the lowest-validation-loss iterate is kept."""
    pool = cuboid_pool(mixed, student.cfg.patch_shape, train_cfg.stride)
    validate = None
    if val_pool:
        validate = lambda m: validation_loss(m, val_pool, train_cfg.loss)  # noqa: E731
    return train(student, pool, train_cfg, aug=aug, log=log, validate=validate)


def run_teacher_student(
    labeled: Sequence,
    unlabeled: Sequence,
    cfg: TeacherStudentConfig,
    base_model: AirwayNet,
    train_cfg: TrainConfig,
    val_items: Sequence | None = None,
    aug: AugmentationSpec | None = None,
    log: Callable[[dict], None] | None = None,
    seed: int = 0,
) -> AirwayNet:
    """Outer loop over iterations, inner loop over unlabeled batches; returns the final student."""
    from .rng import stream

    log = log or (lambda rec: None)
    rng = stream(seed, "pseudo_label")
    order_rng = stream(seed, "unlabeled_order")
    teacher = copy.deepcopy(base_model).eval()
    student = copy.deepcopy(base_model)
    val_pool = None
    if val_items:
        val_pool = [c for c in cuboid_pool(val_items, base_model.cfg.patch_shape) if c.fineness > 0]
    n_batches = cfg.batches_for(len(unlabeled))
    run = 0
    for it in range(cfg.n_iterations):
        order = order_rng.permutation(len(unlabeled))
        for b, part in enumerate(np.array_split(order, n_batches)):
            pseudo = []
            for i in part:
                u = unlabeled[int(i)]
                pl = generate_pseudo_label(teacher, u.volume, cfg, rng)
                pseudo.append((u, pl.mask))
                log({"event": "pseudo_label", "iteration": it, "batch": b, "name": u.name,
                     "threshold": pl.threshold, "largest_only": pl.largest_only,
                     "voxels": pl.mask.count(), "empty": pl.empty})
            mixed = build_mixed_dataset(labeled, pseudo)
            step_cfg = replace(train_cfg, seed=train_cfg.seed + 7919 * run,
                               steps=cfg.student_steps or train_cfg.steps)
            result = train_student(student, mixed, step_cfg, val_pool, aug)
            run += 1
            last = result.history[-1]["loss"] if result.history else None
            log({"event": "train_student", "iteration": it, "batch": b, "items": len(mixed),
                 "pseudo_items": sum(m.pseudo for m in mixed), "steps": step_cfg.steps,
                 "final_loss": last, "best_step": result.best_step, "best_value": result.best_value})
        teacher = copy.deepcopy(student).eval()
        log({"event": "teacher_update", "iteration": it})
    return student
