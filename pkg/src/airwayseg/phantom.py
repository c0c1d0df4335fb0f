"""Synthetic airway-tree phantoms with exact ground truth.

A phantom is a binary tree of straight tubes. The root tube is generation 0
and every bifurcation adds one generation. Each tube is rasterised as a
capsule (cylinder with spherical caps) so that parent/child joints stay
smooth and the lumen mask is a single 26-connected component.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.measure import euler_number

from .errors import ConfigurationError, ContractError
from .volume import BinaryMask, Volume, save_mask, save_volume

LUMEN_HU = -950.0
WALL_HU = 100.0
BACKGROUND_HU = -600.0


@dataclass
class PhantomConfig:
    max_generation: int = 3
    root_radius: float = 5.0
    radius_ratio: float = 0.75
    length_ratio: float = 0.8
    branch_angle: float = 35.0
    volume_shape: tuple = (64, 128, 128)
    noise_sigma: float = 150.0
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)
    # root length as a fraction of the volume extent along the root axis
    root_fraction: float = 0.3
    # relative radius difference between the two children of a bifurcation
    asymmetry: float = 0.0
    # random jitter (degrees) of branch directions, drawn from the seed
    angle_jitter: float = 8.0
    wall_fraction: float = 0.4
    margin: int = 3

    def __post_init__(self):
        self.volume_shape = tuple(int(n) for n in self.volume_shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.max_generation < 0:
            raise ConfigurationError("max_generation must be >= 0")
        if not self.root_radius > 0:
            raise ConfigurationError("root_radius must be > 0")
        if not 0 < self.radius_ratio < 1:
            raise ConfigurationError("radius_ratio must lie in (0, 1)")
        if not 0 < self.length_ratio <= 1:
            raise ConfigurationError("length_ratio must lie in (0, 1]")
        if not 0 < self.branch_angle < 90:
            raise ConfigurationError("branch_angle must lie in (0, 90) degrees")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1:
            raise ConfigurationError(f"bad volume_shape {self.volume_shape}")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if not 0 <= self.asymmetry < 1:
            raise ConfigurationError("asymmetry must lie in [0, 1)")
        smallest = self.root_radius * (self.radius_ratio * (1 - self.asymmetry)) ** self.max_generation
        if smallest < 1.0:
            raise ConfigurationError(
                f"radius at generation {self.max_generation} would be {smallest:.2f} < 1 voxel"
            )


@dataclass
class TubeBranch:
    """One straight tube of the analytic tree (voxel coordinates)."""

    index: int
    generation: int
    parent: int
    start: tuple
    end: tuple
    radius: float

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))


@dataclass
class PhantomCase:
    volume: Volume
    mask: BinaryMask
    branches: list
    generation_map: list
    generation_volume: np.ndarray
    config: PhantomConfig
    skeleton: object = None
    name: str = ""

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    def tree_length(self) -> float:
        """Analytic centreline length in millimetres."""
        sp = np.asarray(self.config.spacing)
        return float(sum(np.linalg.norm((np.subtract(b.end, b.start)) * sp) for b in self.branches))

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "branch_count": self.branch_count,
            "tree_length_mm": self.tree_length(),
            "shape": list(self.volume.shape),
            "spacing": list(self.volume.spacing),
            "generations": self.generation_map,
            "branches": [
                {
                    "index": b.index,
                    "generation": b.generation,
                    "parent": b.parent,
                    "start": list(b.start),
                    "end": list(b.end),
                    "radius": b.radius,
                    "length_mm": float(np.linalg.norm(np.subtract(b.end, b.start) * np.asarray(self.config.spacing))),
                }
                for b in self.branches
            ],
            "config": asdict(self.config),
        }


def _rotate(v, axis, degrees):
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    th = math.radians(degrees)
    axis = axis / np.linalg.norm(axis)
    return v * math.cos(th) + np.cross(axis, v) * math.sin(th) + axis * np.dot(axis, v) * (1 - math.cos(th))


def _perpendicular(d, hint):
    p = np.cross(d, hint)
    if np.linalg.norm(p) < 1e-6:
        p = np.cross(d, np.roll(hint, 1))
    return p / np.linalg.norm(p)


def build_tree(cfg: PhantomConfig, rng: np.random.Generator, scale: float = 1.0) -> list[TubeBranch]:
    """Analytic branch list for the configuration (lengths multiplied by ``scale``)."""
    shape = np.asarray(cfg.volume_shape, dtype=float)
    root_axis = int(np.argmax(shape))
    direction = np.zeros(3)
    direction[root_axis] = 1.0
    start = np.floor((shape - 1) / 2.0)
    start[root_axis] = cfg.margin + cfg.root_radius * (1 + cfg.wall_fraction) + 2
    root_len = cfg.root_fraction * shape[root_axis] * scale

    # plane normals alternate between the two axes orthogonal to the root
    others = [i for i in range(3) if i != root_axis]
    hints = [np.eye(3)[others[0]], np.eye(3)[others[1]]]

    branches: list[TubeBranch] = []
    frontier = [(-1, 0, start, direction, root_len, cfg.root_radius)]
    while frontier:
        parent, gen, s, d, length, radius = frontier.pop(0)
        e = s + d * length
        idx = len(branches)
        branches.append(TubeBranch(idx, gen, parent, tuple(s), tuple(e), float(radius)))
        if gen == cfg.max_generation:
            continue
        normal = _perpendicular(d, hints[gen % 2])
        for sign, rfac in ((+1, 1 + cfg.asymmetry), (-1, 1 - cfg.asymmetry)):
            angle = cfg.branch_angle + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter)
            child_dir = _rotate(d, normal, sign * angle)
            # small twist about the parent axis keeps successive planes from being exactly coplanar
            child_dir = _rotate(child_dir, d, rng.uniform(-cfg.angle_jitter, cfg.angle_jitter))
            child_dir /= np.linalg.norm(child_dir)
            frontier.append(
                (idx, gen + 1, e, child_dir, length * cfg.length_ratio, radius * cfg.radius_ratio * rfac)
            )
    return branches


def _fits(branches, cfg: PhantomConfig) -> bool:
    hi = np.asarray(cfg.volume_shape, dtype=float) - 1 - cfg.margin
    for b in branches:
        reach = b.radius * (1 + cfg.wall_fraction) + 1
        for p in (b.start, b.end):
            p = np.asarray(p)
            if np.any(p - reach < cfg.margin) or np.any(p + reach > hi):
                return False
    return True


def _resolvable(branches) -> bool:
    # a tube shorter than its own diameter collapses into its parent's joint after thinning
    return all(b.length >= 2.5 * b.radius + 3 for b in branches)


def _segment_gap(b1: TubeBranch, b2: TubeBranch, samples: int = 24) -> float:
    t = np.linspace(0.0, 1.0, samples)[:, None]
    p1 = np.asarray(b1.start) + t * np.subtract(b1.end, b1.start)
    p2 = np.asarray(b2.start) + t * np.subtract(b2.end, b2.start)
    return float(np.min(np.linalg.norm(p1[:, None] - p2[None], axis=-1)))


def _separated(branches, wall_fraction: float) -> bool:
    """Tubes that are not parent/child or siblings must not touch."""
    for i, b1 in enumerate(branches):
        for b2 in branches[i + 1:]:
            if b1.parent == b2.index or b2.parent == b1.index or b1.parent == b2.parent:
                continue
            need = (b1.radius + b2.radius) * (1 + wall_fraction) + 2
            if _segment_gap(b1, b2) < need:
                return False
    return True


def _capsule_distance(coords, start, end):
    """Distance from each coordinate row to the segment ``start``-``end``."""
    seg = end - start
    denom = float(seg @ seg)
    rel = coords - start
    if denom == 0.0:
        return np.linalg.norm(rel, axis=1)
    t = np.clip(rel @ seg / denom, 0.0, 1.0)
    return np.linalg.norm(rel - t[:, None] * seg, axis=1)


def rasterize(branches, shape, wall_fraction: float = 0.4):
    """Lumen mask, wall mask and per-voxel generation (-1 outside the lumen)."""
    lumen = np.zeros(shape, dtype=bool)
    wall = np.zeros(shape, dtype=bool)
    gen_vol = np.full(shape, -1, dtype=np.int16)
    for b in sorted(branches, key=lambda b: -b.generation):
        s, e = np.asarray(b.start), np.asarray(b.end)
        outer = b.radius * (1 + wall_fraction) + 1.0
        lo = np.maximum(np.floor(np.minimum(s, e) - outer).astype(int), 0)
        hi = np.minimum(np.ceil(np.maximum(s, e) + outer).astype(int) + 1, shape)
        grid = np.stack(
            np.meshgrid(*(np.arange(l, h) for l, h in zip(lo, hi)), indexing="ij"), axis=-1
        ).reshape(-1, 3)
        dist = _capsule_distance(grid.astype(float), s, e).reshape(tuple(hi - lo))
        box = tuple(slice(l, h) for l, h in zip(lo, hi))
        inside = dist <= b.radius
        lumen[box] |= inside
        wall[box] |= dist <= b.radius * (1 + wall_fraction) + 0.5
        # lower generations overwrite: processed last
        gen_vol[box][inside] = b.generation
    wall &= ~lumen
    return lumen, wall, gen_vol


def _is_tree_like(lumen: np.ndarray) -> bool:
    """One 26-connected component, no tunnels and no cavities."""
    return euler_number(lumen, connectivity=3) == 1 and ndimage.label(lumen, structure=np.ones((3, 3, 3)))[1] == 1


def generate(cfg: PhantomConfig, name: str = "", with_skeleton: bool = True) -> PhantomCase:
    """Render one phantom case. Deterministic given ``cfg.seed``."""
    branches = None
    scale = 1.0
    for attempt in range(60):
        rng = np.random.default_rng([cfg.seed, attempt])
        candidate = build_tree(cfg, rng, scale)
        if not _resolvable(candidate):
            break
        if _fits(candidate, cfg) and _separated(candidate, cfg.wall_fraction):
            raster = rasterize(candidate, cfg.volume_shape, cfg.wall_fraction)
            # close siblings can leave a one-voxel tunnel; a tree must be simply connected
            if _is_tree_like(raster[0]):
                branches = candidate
                break
        # redraw the jitter a few times before shrinking
        if attempt % 4 == 3:
            scale *= 0.92
    if branches is None:
        raise ConfigurationError(
            f"a generation-{cfg.max_generation} tree does not fit in {cfg.volume_shape} "
            "even after shrinking branch lengths"
        )

    shape = cfg.volume_shape
    lumen, wall, gen_vol = raster
    noise_rng = np.random.default_rng([cfg.seed, 1])
    img = np.full(shape, BACKGROUND_HU, dtype=np.float32)
    img[wall] = WALL_HU
    img[lumen] = LUMEN_HU
    if cfg.noise_sigma > 0:
        img += noise_rng.normal(0.0, cfg.noise_sigma, size=shape).astype(np.float32)

    case = PhantomCase(
        volume=Volume(img, cfg.spacing),
        mask=BinaryMask(lumen, cfg.spacing),
        branches=branches,
        generation_map=[b.generation for b in branches],
        generation_volume=gen_vol,
        config=cfg,
        name=name or f"phantom_{cfg.seed:04d}",
    )
    if with_skeleton:
        from .skeleton import skeletonize

        case.skeleton = skeletonize(case.mask)
    return case


def generate_many(cfg: PhantomConfig, n: int, with_skeleton: bool = True) -> list[PhantomCase]:
    """``n`` cases with consecutive seeds starting at ``cfg.seed``."""
    return [generate(replace(cfg, seed=cfg.seed + i), with_skeleton=with_skeleton) for i in range(n)]


@dataclass
class LabeledItem:
    name: str
    volume: Volume
    mask: BinaryMask


@dataclass
class UnlabeledItem:
    name: str
    volume: Volume


def split_dataset(cases, n_labeled: int, seed: int = 0):
    """Disjoint random split into labeled items and volume-only unlabeled items."""
    if not 0 <= n_labeled <= len(cases):
        raise ContractError(f"n_labeled={n_labeled} outside [0, {len(cases)}]")
    order = np.random.default_rng(seed).permutation(len(cases))
    labeled = [LabeledItem(cases[i].name, cases[i].volume, cases[i].mask) for i in order[:n_labeled]]
    unlabeled = [UnlabeledItem(cases[i].name, cases[i].volume) for i in order[n_labeled:]]
    return labeled, unlabeled


def write_case(case: PhantomCase, directory) -> dict:
    """Write ``<name>_image.nvk``, ``<name>_label.nvk`` and ``<name>.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_volume(case.volume, directory / f"{case.name}_image.nvk")
    save_mask(case.mask, directory / f"{case.name}_label.nvk")
    meta = case.metadata()
    (directory / f"{case.name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta
