"""Bronchiole-sensitive dice loss, its closed-form gradients and the imbalance weight.

The airway term squares the predicted confidence inside the overlap
(``p**2``, with ``p**4`` in the denominator), so a voxel needs ``p > 1/sqrt(2)``
before its squared confidence passes 0.5. The background term is an ordinary
soft dice on the background map against the inverted label.

Reference implementations here are float64 numpy; :func:`torch_total_loss`
is the differentiable version used for training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError

W_MIN = 0.01
W_MAX = 10.0


@dataclass(frozen=True)
class LossWeights:
    w: float = 1.0
    w_min: float = W_MIN
    w_max: float = W_MAX
    c: float = 1.0

    def __post_init__(self):
        if not self.w > 0:
            raise ConfigurationError(f"w must be > 0, got {self.w}")
        if not self.w_min <= self.w <= self.w_max:
            raise ConfigurationError(f"w={self.w} outside clamp [{self.w_min}, {self.w_max}]")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    airway: float
    background: float


def compute_weight(label, c: float = 1.0, w_min: float = W_MIN, w_max: float = W_MAX) -> LossWeights:
    """``w = clamp(c * N_airway / N_background, w_min, w_max)``."""
    a = np.asarray(getattr(label, "data", label), dtype=bool)
    if a.size == 0:
        raise ContractError("label must be non-empty")
    n_airway = int(a.sum())
    n_background = a.size - n_airway
    if n_background == 0:
        w = w_max
    else:
        w = float(np.clip(c * n_airway / n_background, w_min, w_max))
    return LossWeights(w, w_min, w_max, c)


def _prepare(p, a):
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if p.shape != a.shape:
        raise ContractError(f"confidence shape {p.shape} != label shape {a.shape}")
    return p, a


def _w(weights) -> float:
    return float(getattr(weights, "w", weights))


def loss_airway(p, a, weights=1.0, eps: float = 0.0) -> float:
    """``1 - 2 sum(p^2 a w) / (sum(p^4) + sum(a^2))``; 0 when both sums vanish."""
    p, a = _prepare(p, a)
    num = 2.0 * np.sum(p**2 * a) * _w(weights)
    den = np.sum(p**4) + np.sum(a**2) + eps
    if den == 0.0:
        return 0.0
    return float(1.0 - num / den)


def loss_background(p, a, weights=1.0, eps: float = 0.0) -> float:
    """``1 - 2 sum(p a w) / (sum(p^2) + sum(a^2))``; 0 when both sums vanish."""
    p, a = _prepare(p, a)
    num = 2.0 * np.sum(p * a) * _w(weights)
    den = np.sum(p**2) + np.sum(a**2) + eps
    if den == 0.0:
        return 0.0
    return float(1.0 - num / den)


def grad_airway(p, a, weights=1.0) -> np.ndarray:
    """Closed-form ``dL_aw/dp_k`` for every voxel.

    With a batch-constant weight ``w`` the derivative is ``w`` times
    ``(-4 p a D + 8 p^3 S) / D^2`` where ``D = sum(p^4) + sum(a^2)`` and
    ``S = sum(p^2 a)``.
    """
    p, a = _prepare(p, a)
    den = np.sum(p**4) + np.sum(a**2)
    if den == 0.0:
        return np.zeros_like(p)
    overlap = np.sum(p**2 * a)
    return _w(weights) * (-4.0 * p * a * den + 8.0 * p**3 * overlap) / den**2


def grad_background(p, a, weights=1.0) -> np.ndarray:
    """Closed-form ``dL_bg/dp_k``: ``w (-2 a D + 4 p S) / D^2`` with ``D = sum(p^2) + sum(a^2)``, ``S = sum(p a)``."""
    p, a = _prepare(p, a)
    den = np.sum(p**2) + np.sum(a**2)
    if den == 0.0:
        return np.zeros_like(p)
    overlap = np.sum(p * a)
    return _w(weights) * (-2.0 * a * den + 4.0 * p * overlap) / den**2


def total_loss(maps, label, weights=None) -> LossBreakdown:
    """Sum of the airway term (airway map vs label) and background term (background map vs inverted label)."""
    a = np.asarray(getattr(label, "data", label), dtype=np.float64)
    if maps.shape != a.shape:
        raise ContractError(f"maps shape {maps.shape} != label shape {a.shape}")
    weights = compute_weight(a > 0) if weights is None else weights
    l_aw = loss_airway(maps.airway, a, weights)
    l_bg = loss_background(maps.background, 1.0 - a, weights)
    return LossBreakdown(l_aw + l_bg, l_aw, l_bg)


def total_grad(maps, label, weights=1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`total_loss` w.r.t. the airway and background maps."""
    a = np.asarray(getattr(label, "data", label), dtype=np.float64)
    return grad_airway(maps.airway, a, weights), grad_background(maps.background, 1.0 - a, weights)


# --- torch ------------------------------------------------------------------

LOSS_KINDS = ("proposed", "dice")


def torch_total_loss(airway, background, label, w, kind: str = "proposed", eps: float = 1e-6):
    """Differentiable loss over a whole batch.

    ``airway``/``background``/``label`` are tensors of equal shape; sums run
    over every voxel of the batch and ``w`` is one scalar for the batch.
    ``kind="dice"`` swaps the airway term for a plain soft dice (ablation).
    Returns ``(total, airway_term, background_term)`` tensors.
    """
    if kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {kind!r}")
    if airway.shape != label.shape or background.shape != label.shape:
        raise ContractError("prediction and label shapes differ")
    a = label.to(airway.dtype)
    if kind == "proposed":
        q = airway * airway
        l_aw = 1.0 - 2.0 * w * (q * a).sum() / ((q * q).sum() + (a * a).sum() + eps)
    else:
        l_aw = 1.0 - 2.0 * w * (airway * a).sum() / ((airway * airway).sum() + (a * a).sum() + eps)
    b = 1.0 - a
    l_bg = 1.0 - 2.0 * w * (background * b).sum() / ((background * background).sum() + (b * b).sum() + eps)
    return l_aw + l_bg, l_aw, l_bg
