"""Thresholding, largest-component selection and gap reconnection.

A thresholded prediction usually splits into one large tree and a few
fragments. Fragments that come within a small radius of a branch end of the
main tree are treated as broken-off branches: they are merged back and the
gap between them is filled with voxels that pass a lower threshold inside
that neighbourhood. Everything else is discarded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractError
from .skeleton import thin
from .volume import BinaryMask, ConfidenceMaps

_CUBE = np.ones((3, 3, 3), dtype=bool)


@dataclass
class ComponentSet:
    """26-connected shapes sorted by size, largest first.

    ``labels`` holds ``i + 1`` for voxels of ``shapes[i]``; ties in size are
    ordered by the lexicographically smallest voxel of each shape.
    """

    labels: np.ndarray
    sizes: list
    seeds: list  # smallest voxel (z, y, x) of each shape

    @property
    def n(self) -> int:
        return len(self.sizes)

    @property
    def largest(self) -> int | None:
        return 0 if self.sizes else None

    def mask(self, i: int) -> np.ndarray:
        return self.labels == i + 1


@dataclass(frozen=True)
class ReconnectConfig:
    threshold: float = 0.5
    search_radius: float = 5.0
    relaxed_threshold: float = 0.3
    max_rounds: int = 50

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ConfigurationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.search_radius > 0:
            raise ConfigurationError(f"search_radius must be > 0, got {self.search_radius}")
        if not 0 < self.relaxed_threshold < self.threshold:
            raise ConfigurationError("relaxed_threshold must lie in (0, threshold)")


def threshold_map(maps, t: float = 0.5) -> BinaryMask:
    """Airway confidence strictly above ``t``."""
    if not 0 < t < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {t}")
    airway = getattr(maps, "airway", maps)
    return BinaryMask(np.asarray(airway) > t, getattr(maps, "spacing", (1.0, 1.0, 1.0)))


def connected_components(mask) -> ComponentSet:
    data = np.asarray(getattr(mask, "data", mask), dtype=bool)
    raw, n = ndimage.label(data, structure=_CUBE)
    if n == 0:
        return ComponentSet(np.zeros(data.shape, dtype=np.int32), [], [])
    sizes = np.bincount(raw.ravel())[1:]
    # first voxel in C order of each label is its lexicographic minimum
    flat = raw.ravel()
    nz = np.flatnonzero(flat)
    first = np.full(n, -1, dtype=np.int64)
    labels_at = flat[nz] - 1
    order = np.argsort(labels_at, kind="stable")
    boundaries = np.r_[0, np.flatnonzero(np.diff(labels_at[order])) + 1]
    first[labels_at[order][boundaries]] = nz[order][boundaries]
    key = sorted(range(n), key=lambda i: (-int(sizes[i]), int(first[i])))
    remap = np.zeros(n + 1, dtype=np.int32)
    for rank, i in enumerate(key):
        remap[i + 1] = rank + 1
    labels = remap[raw]
    seeds = [tuple(int(c) for c in np.unravel_index(first[i], data.shape)) for i in key]
    return ComponentSet(labels, [int(sizes[i]) for i in key], seeds)


def largest_component(mask) -> BinaryMask:
    data = np.asarray(getattr(mask, "data", mask), dtype=bool)
    comps = connected_components(data)
    out = comps.mask(0) if comps.n else np.zeros_like(data)
    return BinaryMask(out, getattr(mask, "spacing", (1.0, 1.0, 1.0)))


def skeleton_endpoints(mask: np.ndarray) -> np.ndarray:
    """Centreline voxels with exactly one 26-neighbour (a lone voxel counts as an end)."""
    skel = thin(mask)
    counts = ndimage.convolve(skel.astype(np.int32), _CUBE.astype(np.int32), mode="constant") - 1
    return np.argwhere(skel & (counts <= 1))


def _ball(radius: float) -> tuple[np.ndarray, int]:
    r = int(np.floor(radius))
    g = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (g**2).sum(axis=0) <= radius**2, r


def _ball_at(shape, centre, ball, r) -> tuple[tuple[slice, ...], np.ndarray]:
    """Slices into a grid of ``shape`` and the matching part of ``ball`` centred at ``centre``."""
    grid_sl, ball_sl = [], []
    for c, n in zip(centre, shape):
        lo, hi = c - r, c + r + 1
        grid_sl.append(slice(max(lo, 0), min(hi, n)))
        ball_sl.append(slice(max(lo, 0) - lo, 2 * r + 1 - (hi - min(hi, n))))
    return tuple(grid_sl), ball[tuple(ball_sl)]


def reconnect_branches(maps, comps: ComponentSet, cfg: ReconnectConfig = ReconnectConfig()) -> BinaryMask:
    """Merge fragments that reach into the search ball of a main-tree endpoint.

    Each round takes the skeleton endpoints of the current tree; for every
    ball that touches a not-yet-merged shape, that shape and all ball voxels
    above the relaxed threshold are added. Only the 26-component containing
    the original largest shape is kept, so the result is one component.
    Rounds repeat until nothing merges.
    """
    airway = np.asarray(getattr(maps, "airway", maps), dtype=np.float32)
    spacing = getattr(maps, "spacing", (1.0, 1.0, 1.0))
    if comps.n == 0:
        return BinaryMask(np.zeros(airway.shape, dtype=bool), spacing)
    main = comps.mask(0)
    anchor = comps.seeds[0]
    if comps.n == 1:
        return BinaryMask(main, spacing)

    ball, r = _ball(cfg.search_radius)
    relaxed = airway > cfg.relaxed_threshold
    tried_endpoints = set()
    merged = {1}
    for _ in range(cfg.max_rounds):
        grew = False
        for e in skeleton_endpoints(main):
            e = tuple(int(c) for c in e)
            if e in tried_endpoints:
                continue
            tried_endpoints.add(e)
            sl, b = _ball_at(airway.shape, e, ball, r)
            hit = set(np.unique(comps.labels[sl][b]).tolist()) - {0} - merged
            if not hit:
                continue
            add = np.isin(comps.labels, list(hit))
            add[sl] |= b & relaxed[sl]
            main = main | add
            merged |= hit
            grew = True
        if not grew:
            break
        lab, _ = ndimage.label(main, structure=_CUBE)
        main = lab == lab[anchor]
    return BinaryMask(main, spacing)


def postprocess(maps, cfg: ReconnectConfig = ReconnectConfig()) -> BinaryMask:
    """Threshold, label components and reconnect; the output is one 26-connected shape or empty."""
    mask = threshold_map(maps, cfg.threshold)
    comps = connected_components(mask)
    return reconnect_branches(maps, comps, cfg)


def as_confidence(mask: BinaryMask) -> ConfidenceMaps:
    """Hard 0/1 maps for feeding a mask back through :func:`postprocess`."""
    return ConfidenceMaps.from_mask(mask)
