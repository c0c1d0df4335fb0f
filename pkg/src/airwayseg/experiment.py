"""End-to-end runs on phantom datasets: dataset, training, evaluation, ablations.

Named variants are override lists applied to a base :class:`RunConfig`; the
``semi`` variant continues the supervised model of the same seed with
teacher-student training, so it is paired with the baseline by construction.
"""
from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import AirwayNet, build_model
from .config import RunConfig
from .errors import ConfigurationError
from .inference import predict_volume
from .metrics import METRIC_COLUMNS, MetricReport, evaluate, format_table
from .phantom import PhantomCase, generate_many, split_dataset
from .postproc import postprocess
from .rng import torch_seed
from .semisup import run_teacher_student
from .training import TrainResult, cuboid_pool, train

VARIANTS: dict[str, tuple] = {
    "proposed": (),
    "dice": ("train.loss=dice",),
    "iterative": ("train.strategy=iterative",),
    "same_frequency": ("train.strategy=same_frequency",),
    "coarse_then_fine": ("train.strategy=coarse_then_fine",),
    "fine_then_coarse": ("train.strategy=fine_then_coarse",),
    "more_on_fine_beta1": ("train.strategy=more_high", "train.beta=1"),
    "more_on_fine_beta10": ("train.strategy=more_high", "train.beta=10"),
    "more_on_coarse_beta1": ("train.strategy=more_low", "train.beta=1"),
    "more_on_coarse_beta10": ("train.strategy=more_low", "train.beta=10"),
    "no_attention_dilation": ("model.use_attention=false", "model.use_dilation=false"),
    "semi": (),
}
SEMI_VARIANTS = {"semi"}


@dataclass
class Dataset:
    labeled: list
    unlabeled: list
    test: list  # PhantomCase, with skeletons
    cases: list = field(default_factory=list)

    def split(self) -> dict:
        return {
            "labeled": [d.name for d in self.labeled],
            "unlabeled": [u.name for u in self.unlabeled],
            "test": [c.name for c in self.test],
        }


def make_dataset(cfg: RunConfig, seed: int | None = None) -> Dataset:
    """Phantom cases for one run seed: the last ``n_test`` are held out, the rest split labeled/unlabeled."""
    seed = cfg.seed if seed is None else seed
    base = replace(cfg.phantom, seed=cfg.phantom.seed + 10_000 * seed)
    cases = generate_many(base, cfg.data.n_cases)
    n_test = cfg.data.n_test
    pool, test = cases[: len(cases) - n_test], cases[len(cases) - n_test :]
    labeled, unlabeled = split_dataset(pool, cfg.data.n_labeled, seed)
    return Dataset(labeled, unlabeled, test, cases)


def train_supervised(cfg: RunConfig, labeled: Sequence, log: Callable | None = None) -> tuple[AirwayNet, TrainResult]:
    torch.set_num_threads(cfg.threads)
    model = build_model(cfg.model, seed=torch_seed(cfg.seed, "init"))
    pool = cuboid_pool(labeled, cfg.model.patch_shape, cfg.train.stride)
    result = train(model, pool, replace(cfg.train, seed=cfg.seed), aug=cfg.augment, log=log)
    return model, result


def train_semi(cfg: RunConfig, base: AirwayNet, data: Dataset, log: Callable | None = None) -> AirwayNet:
    if not data.unlabeled:
        raise ConfigurationError("teacher-student training needs unlabeled cases (data.n_labeled < n_cases - n_test)")
    torch.set_num_threads(cfg.threads)
    return run_teacher_student(
        data.labeled, data.unlabeled, cfg.semi, base, replace(cfg.train, seed=cfg.seed),
        val_items=data.labeled, aug=cfg.augment, log=log, seed=cfg.seed,
    )


def segment(model: AirwayNet, volume, cfg: RunConfig):
    maps = predict_volume(model, volume, cfg.infer.stride, fusion=cfg.infer.fusion, batch_size=cfg.infer.batch_size)
    return postprocess(maps, cfg.postproc)


def evaluate_cases(model: AirwayNet, cases: Sequence[PhantomCase], cfg: RunConfig) -> list[MetricReport]:
    out = []
    for c in cases:
        pred = segment(model, c.volume, cfg)
        out.append(evaluate(pred, c.mask, ref_skel=getattr(c, "skeleton", None), fraction=cfg.metrics.detection_fraction))
    return out


def mean_report(reports: Sequence[MetricReport]) -> dict:
    """Per-column mean over cases, skipping undefined values."""
    out = {}
    for col in METRIC_COLUMNS:
        vals = [getattr(r, col) for r in reports if getattr(r, col) is not None]
        out[col] = float(np.mean(vals)) if vals else None
    return out


def seed_summary(per_seed: Sequence[dict]) -> dict:
    """Mean and std across seeds of per-seed means."""
    out = {}
    for col in METRIC_COLUMNS:
        vals = [d[col] for d in per_seed if d.get(col) is not None]
        out[col] = (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)
    return out


@dataclass
class AblationResult:
    per_seed: dict = field(default_factory=dict)  # variant -> list of per-seed mean dicts
    seconds: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {v: seed_summary(rows) for v, rows in self.per_seed.items()}

    def table(self) -> str:
        return format_table(self.summary())

    def to_json(self) -> str:
        return json.dumps({"per_seed": self.per_seed, "summary": self.summary(), "seconds": self.seconds}, indent=2)


def variant_config(cfg: RunConfig, name: str, seed: int) -> RunConfig:
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return cfg.with_overrides([*VARIANTS[name], f"seed={seed}"])


def run_ablation(
    cfg: RunConfig,
    variants: Sequence[str] | None = None,
    seeds: Sequence[int] | None = None,
    log: Callable | None = None,
) -> AblationResult:
    """Train and evaluate every variant on every seed; runs sharing a config share one trained model."""
    variants = list(cfg.ablate.variants if variants is None else variants)
    seeds = list(cfg.ablate.seeds if seeds is None else seeds)
    log = log or (lambda rec: None)
    result = AblationResult({v: [] for v in variants}, {v: 0.0 for v in variants})
    for seed in seeds:
        data = make_dataset(cfg, seed)
        trained: dict[str, AirwayNet] = {}
        for name in variants:
            t0 = time.perf_counter()
            vcfg = variant_config(cfg, name, seed)
            key = json.dumps(vcfg.to_dict(), sort_keys=True)
            if key not in trained:
                trained[key], _ = train_supervised(vcfg, data.labeled)
            model = trained[key]
            if name in SEMI_VARIANTS:
                model = train_semi(vcfg, copy.deepcopy(model), data)
            means = mean_report(evaluate_cases(model, data.test, vcfg))
            result.per_seed[name].append(means)
            result.seconds[name] += time.perf_counter() - t0
            log({"event": "ablation_run", "variant": name, "seed": seed, **means})
    return result
