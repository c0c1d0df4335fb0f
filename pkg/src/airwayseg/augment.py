"""Random augmentation of (image, label) cuboids.

Geometric transforms (flip, affine) move image and label together, the
label resampled with nearest neighbour so it stays binary. Intensity
transforms (blur, noise, motion, spike) touch the image only.

Parameters are drawn first (:func:`sample_params`) and applied second
(:func:`apply_params`), so one draw can be replayed on other inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError


@dataclass
class AugmentationSpec:
    flip_axes: tuple = (0, 1, 2)
    p_flip: float = 0.5  # per axis
    p_affine: float = 0.3
    rotation_degrees: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    p_blur: float = 0.2
    blur_sigma: tuple = (0.3, 1.0)
    p_noise: float = 0.3
    noise_sigma: tuple = (0.0, 0.05)
    p_motion: float = 0.1
    motion_shift: int = 2  # max in-plane slice shift in voxels
    p_spike: float = 0.1
    spike_intensity: tuple = (0.05, 0.2)  # spike magnitude as a fraction of the peak spectrum value

    def __post_init__(self):
        for name in ("p_flip", "p_affine", "p_blur", "p_noise", "p_motion", "p_spike"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
        for name in ("scale_range", "blur_sigma", "noise_sigma", "spike_intensity"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigurationError(f"{name} must be an increasing non-negative range")
        if not set(self.flip_axes) <= {0, 1, 2}:
            raise ConfigurationError("flip_axes must be a subset of (0, 1, 2)")

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(p_flip=0, p_affine=0, p_blur=0, p_noise=0, p_motion=0, p_spike=0)


def _rotation(angles) -> np.ndarray:
    a, b, c = np.deg2rad(angles)
    rz = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rx = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_params(spec: AugmentationSpec, rng: np.random.Generator, shape) -> dict:
    p = {"flip": [ax for ax in spec.flip_axes if rng.random() < spec.p_flip]}
    if rng.random() < spec.p_affine:
        angles = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees, size=3)
        scale = rng.uniform(*spec.scale_range)
        p["affine"] = (_rotation(angles) / scale).tolist()
    if rng.random() < spec.p_blur:
        p["blur"] = float(rng.uniform(*spec.blur_sigma))
    if rng.random() < spec.p_noise:
        p["noise"] = (float(rng.uniform(*spec.noise_sigma)), int(rng.integers(2**31)))
    if rng.random() < spec.p_motion and shape[0] > 1:
        k = int(rng.integers(1, shape[0]))
        shift = rng.integers(-spec.motion_shift, spec.motion_shift + 1, size=2)
        p["motion"] = (k, int(shift[0]), int(shift[1]))
    if rng.random() < spec.p_spike:
        pos = tuple(int(rng.integers(n)) for n in shape)
        p["spike"] = (pos, float(rng.uniform(*spec.spike_intensity)))
    return p


def apply_geometric(grid: np.ndarray, params: dict, order: int) -> np.ndarray:
    out = grid
    for ax in params.get("flip", []):
        out = np.flip(out, axis=ax)
    if "affine" in params:
        m = np.asarray(params["affine"])
        centre = (np.asarray(out.shape) - 1) / 2.0
        offset = centre - m @ centre
        src = out.astype(np.float32) if order else out.astype(np.uint8)
        out = ndimage.affine_transform(src, m, offset=offset, order=order, mode="nearest")
    return np.ascontiguousarray(out)


def apply_intensity(image: np.ndarray, params: dict) -> np.ndarray:
    out = image.astype(np.float32, copy=True)
    if "blur" in params:
        out = ndimage.gaussian_filter(out, params["blur"])
    if "noise" in params:
        sigma, seed = params["noise"]
        out = out + np.random.default_rng(seed).normal(0.0, sigma, size=out.shape).astype(np.float32)
    if "motion" in params:
        k, dy, dx = params["motion"]
        out[k:] = np.roll(out[k:], (dy, dx), axis=(1, 2))
    if "spike" in params:
        pos, strength = params["spike"]
        spec = np.fft.fftn(out)
        spec[pos] += strength * np.abs(spec).max()
        out = np.real(np.fft.ifftn(spec)).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def apply_params(image: np.ndarray, label: np.ndarray, params: dict) -> tuple[np.ndarray, np.ndarray]:
    img = apply_geometric(image, params, order=1).astype(np.float32)
    lab = apply_geometric(label, params, order=0).astype(bool)
    return apply_intensity(img, params), lab


def augment(image: np.ndarray, label: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator):
    return apply_params(image, label, sample_params(spec, rng, image.shape))
