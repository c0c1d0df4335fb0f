"""Fineness scoring, fineness-weighted cuboid sampling and the mode schedule.

Cuboids whose airway content is thin (high generation) expose a large share
of their airway voxels on the surface, so the surface fraction ``t`` is used
as a proxy for branch fineness. Sampling either favours high ``t``
(``more_high``), low ``t`` (``more_low``) or ignores it (``same_frequency``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractError

MORE_HIGH = "more_high"
MORE_LOW = "more_low"
SAME_FREQUENCY = "same_frequency"
MODES = (MORE_HIGH, MORE_LOW, SAME_FREQUENCY)

# Schedule strategies. "fine" = high generations, "coarse" = low generations.
STRATEGIES = (
    "iterative",
    "coarse_then_fine",
    "fine_then_coarse",
    "same_frequency",
    "more_high",
    "more_low",
)

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def compute_fineness(label) -> float:
    """Fraction of airway voxels lying on the airway surface.

    A voxel is on the surface when at least one of its six face neighbours
    is background or outside the patch. Returns 0 for an empty label.
    """
    a = np.asarray(getattr(label, "data", label), dtype=bool)
    n = int(a.sum())
    if n == 0:
        return 0.0
    interior = ndimage.binary_erosion(a, structure=_FACE_NEIGHBOURS, border_value=0)
    return (n - int(interior.sum())) / n


@dataclass
class SamplerConfig:
    beta: float = 1.0
    delta: float = 0.01
    # delta is a multiple of the mean airway-cuboid weight when True, absolute otherwise
    delta_relative: bool = True
    # reproduce the printed table entry (weight beta for airway-free cuboids) instead of delta
    literal_zero_weight: bool = False
    mode: str = MORE_HIGH
    phase_length: int | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be > 0, got {self.beta}")
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be > 0, got {self.delta}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown sampling mode {self.mode!r}")
        if self.phase_length is not None and self.phase_length < 1:
            raise ConfigurationError(f"phase_length must be >= 1, got {self.phase_length}")


@dataclass
class SamplingTable:
    items: list
    weights: np.ndarray
    probabilities: np.ndarray
    mode: str

    def __len__(self):
        return len(self.items)


def sampling_weights(fineness: Sequence[float], cfg: SamplerConfig, mode: str | None = None) -> np.ndarray:
    """Unnormalised per-cuboid weights for the given fineness scores."""
    mode = cfg.mode if mode is None else mode
    if mode not in MODES:
        raise ConfigurationError(f"unknown sampling mode {mode!r}")
    t = np.asarray(fineness, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ContractError("need a non-empty 1D sequence of fineness scores")
    if mode == SAME_FREQUENCY:
        return np.ones_like(t)

    nonzero = t != 0
    w = np.empty_like(t)
    if mode == MORE_HIGH:
        w[nonzero] = cfg.beta * t[nonzero]
    else:
        w[nonzero] = 1.0 / (cfg.beta * t[nonzero])

    if cfg.literal_zero_weight:
        zero_weight = cfg.beta
    elif cfg.delta_relative:
        ref = w[nonzero].mean() if nonzero.any() else 1.0
        zero_weight = cfg.delta * ref
    else:
        zero_weight = cfg.delta
    w[~nonzero] = zero_weight
    return w


def build_table(cuboids: Sequence, cfg: SamplerConfig, mode: str | None = None) -> SamplingTable:
    """Sampling distribution over cuboids.

    ``cuboids`` may be :class:`~airwayseg.volume.CuboidPair` objects or bare
    fineness scores.
    """
    if len(cuboids) == 0:
        raise ContractError("cannot build a sampling table from zero cuboids")
    fineness = [getattr(c, "fineness", c) for c in cuboids]
    mode = cfg.mode if mode is None else mode
    w = sampling_weights(fineness, cfg, mode)
    return SamplingTable(list(cuboids), w, w / w.sum(), mode)


def draw_indices(table: SamplingTable, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    return rng.choice(len(table.items), size=batch_size, replace=True, p=table.probabilities)


def draw_batch(table: SamplingTable, batch_size: int, rng: np.random.Generator) -> list:
    """I.i.d. draws with replacement according to the table probabilities."""
    return [table.items[i] for i in draw_indices(table, batch_size, rng)]


@dataclass
class Schedule:
    """Which sampling mode to use at each training step.

    ``iterative`` alternates ``more_high``/``more_low`` every ``phase_length``
    steps; the two-stage strategies switch once at ``midpoint``.
    """

    strategy: str = "iterative"
    phase_length: int = 100
    midpoint: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.phase_length < 1:
            raise ConfigurationError("phase_length must be >= 1")

    def mode_at(self, step: int) -> str:
        s = self.strategy
        if s == "iterative":
            return MORE_HIGH if (step // self.phase_length) % 2 == 0 else MORE_LOW
        if s == "coarse_then_fine":
            return MORE_LOW if step < self.midpoint else MORE_HIGH
        if s == "fine_then_coarse":
            return MORE_HIGH if step < self.midpoint else MORE_LOW
        if s == "same_frequency":
            return SAME_FREQUENCY
        return s


def advance_schedule(state: Schedule, step: int) -> str:
    return state.mode_at(step)
