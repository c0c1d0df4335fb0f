"""Supervised training on cuboid pools drawn by the fineness sampler."""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import AugmentationSpec, augment
from .backbone import AirwayNet
from .errors import ConfigurationError, DivergenceError
from .inference import WINDOW, inside_origins
from .loss import LOSS_KINDS, compute_weight, torch_total_loss
from .sampler import SamplerConfig, Schedule, build_table, compute_fineness, draw_indices
from .volume import BinaryMask, CuboidPair, Volume, check_aligned, window_intensity


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 2
    lr: float = 1e-3
    loss: str = "proposed"
    strategy: str = "iterative"
    phase_length: int | None = None  # None: one pass over the cuboid pool
    midpoint: int | None = None  # None: half of ``steps``
    beta: float = 1.0
    delta: float = 0.01
    delta_relative: bool = True
    literal_zero_weight: bool = False
    weight_c: float = 1.0
    weight_min: float = 0.01
    weight_max: float = 10.0
    augment: bool = True
    stride: tuple | None = None  # cuboid cropping stride; None: patch shape
    log_every: int = 25
    val_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        # validated again when the sampler config and schedule are built
        self.sampler_config()
        Schedule(self.strategy, 1)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            beta=self.beta,
            delta=self.delta,
            delta_relative=self.delta_relative,
            literal_zero_weight=self.literal_zero_weight,
        )


def cuboid_pool(
    items: Sequence,
    patch_shape: Sequence[int],
    stride: Sequence[int] | None = None,
    window: tuple = WINDOW,
) -> list[CuboidPair]:
    """Windowed cuboids of every item (anything with ``volume``, ``mask``, ``name``; ``pseudo`` optional).

    Origins stay inside the volume, so no padding is introduced.
    """
    patch_shape = tuple(int(p) for p in patch_shape)
    stride = patch_shape if stride is None else tuple(int(s) for s in stride)
    pool = []
    for it in items:
        check_aligned(it.volume, it.mask, "training item")
        img = window_intensity(it.volume, *window).data
        lab = it.mask.data
        for o in inside_origins(img.shape, patch_shape, stride):
            sl = tuple(slice(a, a + p) for a, p in zip(o, patch_shape))
            pi, pl = img[sl], lab[sl]
            if pi.shape != patch_shape:
                raise ConfigurationError(f"volume {img.shape} smaller than patch {patch_shape}")
            pool.append(
                CuboidPair(
                    Volume(pi, it.volume.spacing),
                    BinaryMask(pl, it.mask.spacing),
                    o,
                    compute_fineness(pl),
                    getattr(it, "name", ""),
                    bool(getattr(it, "pseudo", False)),
                )
            )
    return pool


@dataclass
class TrainResult:
    model: AirwayNet
    history: list = field(default_factory=list)
    best_step: int | None = None
    best_value: float | None = None
    seconds: float = 0.0


def _batch(pool, idx, cfg: TrainConfig, spec: AugmentationSpec, rng):
    imgs, labs = [], []
    for i in idx:
        c = pool[i]
        img, lab = c.image.data, c.label.data
        if cfg.augment:
            img, lab = augment(img, lab, spec, rng)
        imgs.append(img)
        labs.append(lab)
    x = torch.from_numpy(np.stack(imgs).astype(np.float32))[:, None]
    y = torch.from_numpy(np.stack(labs).astype(np.float32))
    return x, y, np.stack(labs)


def train(
    model: AirwayNet,
    pool: Sequence[CuboidPair],
    cfg: TrainConfig,
    aug: AugmentationSpec | None = None,
    log: Callable[[dict], None] | None = None,
    validate: Callable[[AirwayNet], float] | None = None,
    sampler_rng: np.random.Generator | None = None,
    aug_rng: np.random.Generator | None = None,
) -> TrainResult:
    """Adam on batches drawn from ``pool`` by the configured schedule.

    When ``validate`` is given it is called every ``val_every`` steps (and at
    the end); the weights with the lowest returned value are restored before
    returning. A non-finite loss raises :class:`DivergenceError` with the model
    left at its last finite weights.
    """
    from .rng import stream

    if len(pool) == 0:
        raise ConfigurationError("empty cuboid pool")
    aug = aug or AugmentationSpec()
    sampler_rng = sampler_rng or stream(cfg.seed, "sampler")
    aug_rng = aug_rng or stream(cfg.seed, "augment")
    phase = cfg.phase_length or max(1, math.ceil(len(pool) / cfg.batch_size))
    midpoint = cfg.steps // 2 if cfg.midpoint is None else cfg.midpoint
    schedule = Schedule(cfg.strategy, phase, midpoint)
    scfg = cfg.sampler_config()
    tables = {}
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    result = TrainResult(model)
    best_state = None
    t0 = time.perf_counter()
    running = []

    def check(step):
        nonlocal best_state
        value = float(validate(model))
        model.train()
        if result.best_value is None or value < result.best_value:
            result.best_value, result.best_step = value, step
            best_state = copy.deepcopy(model.state_dict())
        if log:
            log({"event": "validation", "step": step, "value": value})

    if validate is not None:
        check(0)
    for step in range(cfg.steps):
        mode = schedule.mode_at(step)
        if mode not in tables:
            tables[mode] = build_table(pool, scfg, mode)
        idx = draw_indices(tables[mode], cfg.batch_size, sampler_rng)
        x, y, labs = _batch(pool, idx, cfg, aug, aug_rng)
        w = compute_weight(labs, cfg.weight_c, cfg.weight_min, cfg.weight_max).w
        out = model(x)
        total, l_aw, l_bg = torch_total_loss(out[:, 0], out[:, 1], y, w, kind=cfg.loss)
        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {step}; model holds the last finite weights")
        opt.zero_grad()
        total.backward()
        opt.step()
        rec = {"step": step + 1, "loss": total.item(), "airway": l_aw.item(), "background": l_bg.item(),
               "w": w, "mode": mode}
        result.history.append(rec)
        running.append(rec["loss"])
        if log and ((step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps):
            log({"event": "train", **rec, "mean_loss": float(np.mean(running))})
            running = []
        if validate is not None and cfg.val_every and (step + 1) % cfg.val_every == 0:
            check(step + 1)
    if validate is not None and (not cfg.val_every or cfg.steps % cfg.val_every):
        check(cfg.steps)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    result.seconds = time.perf_counter() - t0
    return result


def validation_loss(model: AirwayNet, pool: Sequence[CuboidPair], kind: str = "proposed", batch_size: int = 4) -> float:
    """Mean total loss over a fixed set of cuboids (no augmentation)."""
    model.eval()
    vals = []
    with torch.no_grad():
        for i in range(0, len(pool), batch_size):
            chunk = pool[i : i + batch_size]
            x = torch.from_numpy(np.stack([c.image.data for c in chunk]).astype(np.float32))[:, None]
            labs = np.stack([c.label.data for c in chunk])
            y = torch.from_numpy(labs.astype(np.float32))
            w = compute_weight(labs).w
            out = model(x)
            vals.append(float(torch_total_loss(out[:, 0], out[:, 1], y, w, kind=kind)[0]))
    return float(np.mean(vals))
