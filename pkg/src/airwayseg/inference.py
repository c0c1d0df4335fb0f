"""Sliding-window prediction over whole volumes."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .backbone import AirwayNet, predict_patches
from .volume import ConfidenceMaps, Volume, stitch_cuboids, window_intensity

WINDOW = (-1000.0, 600.0)


def inside_origins(shape: Sequence[int], patch: Sequence[int], stride: Sequence[int]) -> list[tuple]:
    """Patch origins on a regular grid, the last one per axis pulled back to end at the border."""
    axes = []
    for n, p, s in zip(shape, patch, stride):
        if n <= p:
            axes.append([0])
            continue
        pos = list(range(0, n - p + 1, s))
        if pos[-1] != n - p:
            pos.append(n - p)
        axes.append(pos)
    return [(z, y, x) for z in axes[0] for y in axes[1] for x in axes[2]]


def predict_volume(
    model: AirwayNet,
    volume: Volume,
    stride: Sequence[int] | None = None,
    window: tuple = WINDOW,
    fusion: str = "max",
    batch_size: int = 4,
) -> ConfidenceMaps:
    """Window, tile into model-sized patches, predict and stitch.

    ``stride`` defaults to half the patch shape. Volumes smaller than the patch
    along an axis are edge-padded and cropped back.
    """
    patch = tuple(model.cfg.patch_shape)
    stride = tuple(max(1, p // 2) for p in patch) if stride is None else tuple(stride)
    data = window_intensity(volume, *window).data
    shape = data.shape
    pad = [(0, max(0, p - n)) for n, p in zip(shape, patch)]
    if any(b for _, b in pad):
        data = np.pad(data, pad, mode="edge")
    origins = inside_origins(data.shape, patch, stride)
    tiles = np.stack([data[o[0] : o[0] + patch[0], o[1] : o[1] + patch[1], o[2] : o[2] + patch[2]] for o in origins])
    out = predict_patches(model, tiles, batch_size)
    maps = [(ConfidenceMaps(o[0], o[1]), org) for o, org in zip(out, origins)]
    stitched = stitch_cuboids(maps, data.shape, fusion=fusion, spacing=volume.spacing)
    if data.shape != shape:
        crop = tuple(slice(0, n) for n in shape)
        stitched = ConfidenceMaps(stitched.airway[crop], stitched.background[crop], volume.spacing)
    return stitched
