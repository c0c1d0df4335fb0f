"""Voxel grids, intensity windowing, cuboid cropping/stitching and file IO.

All grids are indexed ``(z, y, x)`` and carry a physical spacing
``(dz, dy, dx)`` in millimetres.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, ContractError, CoverageError, DataIntegrityError, ParseError

Shape3 = tuple[int, int, int]
Spacing3 = tuple[float, float, float]


def _check_spacing(spacing) -> Spacing3:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise DataIntegrityError(f"spacing must have 3 components, got {spacing}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise DataIntegrityError(f"spacing components must be finite and > 0, got {spacing}")
    return spacing


def _check_grid(data: np.ndarray, what: str) -> np.ndarray:
    if data.ndim != 3:
        raise DataIntegrityError(f"{what} must be 3D, got shape {data.shape}")
    if min(data.shape) < 1:
        raise DataIntegrityError(f"{what} shape components must be >= 1, got {data.shape}")
    return data


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid (HU-like units before windowing)."""

    data: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _check_grid(np.asarray(self.data), "volume")
        if not np.issubdtype(data.dtype, np.number):
            raise DataIntegrityError(f"volume dtype must be numeric, got {data.dtype}")
        if not np.all(np.isfinite(data)):
            raise DataIntegrityError("volume contains non-finite voxels")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean grid aligned to a :class:`Volume`."""

    data: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _check_grid(np.asarray(self.data), "mask")
        if data.dtype != bool:
            if not np.all((data == 0) | (data == 1)):
                raise DataIntegrityError("mask values must be 0 or 1")
            data = data.astype(bool)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class ConfidenceMaps:
    """Airway and background confidences, each in ``[0, 1]``."""

    airway: np.ndarray
    background: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        airway = _check_grid(np.asarray(self.airway, dtype=np.float32), "airway map")
        background = _check_grid(np.asarray(self.background, dtype=np.float32), "background map")
        if airway.shape != background.shape:
            raise AlignmentError(f"airway map {airway.shape} != background map {background.shape}")
        for name, grid in (("airway", airway), ("background", background)):
            if not np.all(np.isfinite(grid)) or grid.min() < 0 or grid.max() > 1:
                raise DataIntegrityError(f"{name} confidences must be finite and within [0, 1]")
        object.__setattr__(self, "airway", airway)
        object.__setattr__(self, "background", background)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape3:
        return tuple(self.airway.shape)

    @classmethod
    def from_mask(cls, mask: BinaryMask) -> "ConfidenceMaps":
        """Hard 0/1 confidences for a mask (background = complement)."""
        a = mask.data.astype(np.float32)
        return cls(a, 1.0 - a, mask.spacing)


@dataclass(frozen=True, eq=False)
class CuboidPair:
    """A cropped training patch with its fineness score."""

    image: Volume
    label: BinaryMask
    origin: Shape3
    fineness: float
    source: str = ""
    pseudo: bool = False

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise AlignmentError(f"image patch {self.image.shape} != label patch {self.label.shape}")
        if not 0.0 <= self.fineness <= 1.0:
            raise DataIntegrityError(f"fineness must lie in [0, 1], got {self.fineness}")
        if (self.fineness == 0.0) != (not self.label.data.any()):
            raise DataIntegrityError("fineness must be 0 exactly when the label has no airway voxel")


def check_aligned(a, b, what: str = "grids") -> None:
    if a.shape != b.shape:
        raise AlignmentError(f"{what}: shape {a.shape} != {b.shape}")
    if not np.allclose(a.spacing, b.spacing):
        raise AlignmentError(f"{what}: spacing {a.spacing} != {b.spacing}")


def clamp_intensity(v: Volume, lo: float = -1000.0, hi: float = 600.0) -> Volume:
    """Clamp intensities to ``[lo, hi]`` without rescaling."""
    if not lo < hi:
        raise ContractError(f"window requires lo < hi, got lo={lo}, hi={hi}")
    return Volume(np.clip(v.data, lo, hi), v.spacing)


def window_intensity(v: Volume, lo: float = -1000.0, hi: float = 600.0) -> Volume:
    """Clamp intensities to ``[lo, hi]`` and rescale linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise ContractError(f"window requires lo < hi, got lo={lo}, hi={hi}")
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DataIntegrityError("cannot window a volume with non-finite voxels")
    out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.spacing)


def patch_origins(shape: Sequence[int], patch_shape: Sequence[int], stride: Sequence[int]) -> list[Shape3]:
    """Regular grid of patch origins covering ``shape``; the last patch may overhang."""
    if any(s < 1 for s in stride):
        raise ContractError(f"stride components must be >= 1, got {tuple(stride)}")
    if any(p < 1 for p in patch_shape):
        raise ContractError(f"patch components must be >= 1, got {tuple(patch_shape)}")
    axes = []
    for n, p, s in zip(shape, patch_shape, stride):
        count = 1 if n <= p else math.ceil((n - p) / s) + 1
        axes.append([i * s for i in range(count)])
    return [(z, y, x) for z in axes[0] for y in axes[1] for x in axes[2]]


def extract_patch(data: np.ndarray, origin: Sequence[int], patch_shape: Sequence[int]) -> np.ndarray:
    """Copy a patch out of ``data``, zero-padding past the far edges."""
    out = np.zeros(tuple(patch_shape), dtype=data.dtype)
    src = tuple(slice(o, min(o + p, n)) for o, p, n in zip(origin, patch_shape, data.shape))
    dst = tuple(slice(0, s.stop - s.start) for s in src)
    out[dst] = data[src]
    return out


def crop_cuboids(
    v: Volume,
    m: BinaryMask,
    patch_shape: Sequence[int] = (32, 128, 128),
    stride: Sequence[int] | None = None,
    source: str = "",
    pseudo: bool = False,
) -> list[CuboidPair]:
    """Slide a window over an aligned image/label pair and return every cuboid.

    ``stride`` defaults to the patch shape (no overlap). Edge cuboids are
    zero-padded so that origins stay on a regular grid.
    """
    from .sampler import compute_fineness

    check_aligned(v, m, "crop_cuboids image/label")
    patch_shape = tuple(int(p) for p in patch_shape)
    stride = patch_shape if stride is None else tuple(int(s) for s in stride)
    pairs = []
    for origin in patch_origins(v.shape, patch_shape, stride):
        img = extract_patch(v.data, origin, patch_shape)
        lab = extract_patch(m.data, origin, patch_shape)
        pairs.append(
            CuboidPair(
                image=Volume(img, v.spacing),
                label=BinaryMask(lab, m.spacing),
                origin=origin,
                fineness=compute_fineness(lab),
                source=source,
                pseudo=pseudo,
            )
        )
    return pairs


def stitch_cuboids(
    patches: Iterable[tuple[ConfidenceMaps, Sequence[int]]],
    target_shape: Sequence[int],
    fusion: str = "max",
    spacing: Spacing3 = (1.0, 1.0, 1.0),
) -> ConfidenceMaps:
    """Reassemble patch-wise confidence maps into one grid.

    With ``fusion="max"`` overlapping airway confidences take the voxel-wise
    maximum and background the minimum; ``"mean"`` averages both maps.
    Patch regions that fall outside ``target_shape`` (padding) are dropped.
    """
    if fusion not in ("max", "mean"):
        raise ContractError(f"unknown fusion rule {fusion!r}")
    target_shape = tuple(int(n) for n in target_shape)
    count = np.zeros(target_shape, dtype=np.int32)
    if fusion == "max":
        airway = np.full(target_shape, -np.inf, dtype=np.float32)
        background = np.full(target_shape, np.inf, dtype=np.float32)
    else:
        airway = np.zeros(target_shape, dtype=np.float64)
        background = np.zeros(target_shape, dtype=np.float64)

    for maps, origin in patches:
        dst = tuple(slice(o, min(o + p, n)) for o, p, n in zip(origin, maps.shape, target_shape))
        if any(s.stop <= s.start for s in dst):
            continue
        src = tuple(slice(0, s.stop - s.start) for s in dst)
        count[dst] += 1
        if fusion == "max":
            np.maximum(airway[dst], maps.airway[src], out=airway[dst])
            np.minimum(background[dst], maps.background[src], out=background[dst])
        else:
            airway[dst] += maps.airway[src]
            background[dst] += maps.background[src]

    uncovered = int((count == 0).sum())
    if uncovered:
        raise CoverageError(f"{uncovered} voxels of target {target_shape} are not covered by any patch")
    if fusion == "mean":
        airway /= count
        background /= count
    return ConfidenceMaps(airway.astype(np.float32), background.astype(np.float32), spacing)


# --- file IO ---------------------------------------------------------------

MAGIC = b"NVKIT1"
_HEADER = struct.Struct("<6s3I3dB")
_DTYPE_CODES = {
    1: np.dtype(bool),
    2: np.dtype("<u1"),
    3: np.dtype("<i2"),
    4: np.dtype("<f4"),
    5: np.dtype("<f8"),
}
_CODE_FOR_DTYPE = {dt: code for code, dt in _DTYPE_CODES.items()}


def write_container(path, data: np.ndarray, spacing: Spacing3) -> None:
    """Write a grid in the single-file container format."""
    data = np.asarray(data)
    _check_grid(data, "container payload")
    spacing = _check_spacing(spacing)
    dtype = data.dtype.newbyteorder("<") if data.dtype.byteorder == ">" else data.dtype
    code = _CODE_FOR_DTYPE.get(np.dtype(dtype))
    if code is None:
        raise ContractError(f"unsupported dtype {data.dtype}")
    header = _HEADER.pack(MAGIC, *data.shape, *spacing, code)
    payload = np.ascontiguousarray(data, dtype=_DTYPE_CODES[code]).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_container(path) -> tuple[np.ndarray, Spacing3]:
    """Parse a container file, returning ``(data, spacing)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ParseError(f"file is {len(raw)} bytes, shorter than the {_HEADER.size}-byte header", "header")
    magic, d, h, w, sz, sy, sx, code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ParseError(f"expected {MAGIC!r}, found {magic!r}", "magic")
    if min(d, h, w) < 1:
        raise ParseError(f"dims must be >= 1, got {(d, h, w)}", "shape")
    spacing = (sz, sy, sx)
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ParseError(f"components must be finite and > 0, got {spacing}", "spacing")
    if code not in _DTYPE_CODES:
        raise ParseError(f"unknown dtype code {code}", "dtype")
    dtype = _DTYPE_CODES[code]
    expected = d * h * w * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise ParseError(f"expected {expected} payload bytes for shape {(d, h, w)}, found {len(payload)}", "data")
    data = np.frombuffer(payload, dtype=dtype).reshape(d, h, w).copy()
    return data, spacing


def save_volume(v: Volume, path) -> None:
    write_container(path, v.data, v.spacing)


def load_volume(path) -> Volume:
    data, spacing = read_container(path)
    if data.dtype == bool:
        data = data.astype(np.uint8)
    return Volume(data, spacing)


def save_mask(m: BinaryMask, path) -> None:
    write_container(path, m.data.astype(bool), m.spacing)


def load_mask(path) -> BinaryMask:
    data, spacing = read_container(path)
    if data.dtype != bool:
        if data.dtype.kind == "f" or not np.all((data == 0) | (data == 1)):
            raise ParseError(f"mask files must hold binary values, found dtype {data.dtype}", "dtype")
    return BinaryMask(data.astype(bool), spacing)


def load_nifti(path) -> Volume:
    """Import a ``.nii``/``.nii.gz`` volume (requires the optional ``nibabel``)."""
    try:
        import nibabel
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImportError("NIfTI import needs the optional dependency: pip install 'artifact[nifti]'") from exc
    img = nibabel.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise ParseError(f"expected a 3D image, got {data.ndim} dims", "shape")
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    # NIfTI stores (x, y, z); grids here are (z, y, x)
    return Volume(np.ascontiguousarray(data.transpose(2, 1, 0)), zooms[::-1])
