"""Independent reference computations used as test oracles."""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import replace

import numpy as np

from airwayseg.phantom import PhantomConfig, generate, rasterize


def brute_confusion(pred, ref):
    """Voxel-by-voxel enumeration; TN only inside the reference's tight box."""
    tp = fp = fn = 0
    lo = [None, None, None]
    hi = [None, None, None]
    for idx in itertools.product(*(range(n) for n in ref.shape)):
        p, r = bool(pred[idx]), bool(ref[idx])
        tp += p and r
        fp += p and not r
        fn += r and not p
        if r:
            for k in range(3):
                lo[k] = idx[k] if lo[k] is None else min(lo[k], idx[k])
                hi[k] = idx[k] if hi[k] is None else max(hi[k], idx[k])
    tn = 0
    if lo[0] is not None:
        for idx in itertools.product(*(range(lo[k], hi[k] + 1) for k in range(3))):
            tn += (not pred[idx]) and (not ref[idx])
    return tp, fp, fn, tn


def brute_overall(pred, ref):
    tp, fp, fn, tn = brute_confusion(pred, ref)

    def ratio(a, b):
        return None if b == 0 else a / b

    return {
        "dsc": ratio(2 * tp, 2 * tp + fp + fn),
        "sensitivity": ratio(tp, tp + fn),
        "precision": ratio(tp, tp + fp),
        "fpr": ratio(fp, fp + tn),
    }


def flood_fill_components(mask):
    """Sizes of 26-connected components by breadth-first search, largest first."""
    seen = np.zeros(mask.shape, bool)
    sizes = []
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        n = 0
        while queue:
            v = queue.popleft()
            n += 1
            for o in offsets:
                q = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
                if all(0 <= q[i] < mask.shape[i] for i in range(3)) and mask[q] and not seen[q]:
                    seen[q] = True
                    queue.append(q)
        sizes.append(n)
    return sorted(sizes, reverse=True)


def subtree(case, removed):
    """Branch indices kept after deleting ``removed`` branches and all their descendants."""
    children = {}
    for b in case.branches:
        children.setdefault(b.parent, []).append(b.index)
    drop = set()
    stack = list(removed)
    while stack:
        i = stack.pop()
        drop.add(i)
        stack.extend(children.get(i, []))
    return [b.index for b in case.branches if b.index not in drop]


def contracted_branch_count(case, kept):
    """Branches of the kept tree once parent/only-child pairs merge into one branch."""
    kept = set(kept)
    kids = {i: [b.index for b in case.branches if b.parent == i and b.index in kept] for i in kept}
    return len(kept) - sum(1 for i in kept if len(kids[i]) == 1)


def analytic_length(case, kept):
    sp = np.asarray(case.config.spacing)
    return float(sum(np.linalg.norm(np.subtract(b.end, b.start) * sp) for b in case.branches if b.index in set(kept)))


def render(case, kept):
    branches = [b for b in case.branches if b.index in set(kept)]
    lumen, _, _ = rasterize(branches, case.mask.shape, case.config.wall_fraction)
    return lumen


SMALL_TREE = PhantomConfig(max_generation=2, volume_shape=(48, 96, 96), root_radius=4.0, radius_ratio=0.8)


def small_case(seed):
    return generate(replace(SMALL_TREE, seed=seed))


def _capsule_distance(points, branch):
    s, e = np.asarray(branch.start), np.asarray(branch.end)
    seg = e - s
    t = np.clip((points - s) @ seg / (seg @ seg), 0, 1)
    return np.linalg.norm(points - s - t[:, None] * seg, axis=1)


def analytic_inside_length(case, kept, samples=400):
    """Centreline length of every branch that lies inside the union of kept tubes."""
    sp = np.asarray(case.config.spacing)
    kept_branches = [b for b in case.branches if b.index in set(kept)]
    total = 0.0
    for b in case.branches:
        s, e = np.asarray(b.start), np.asarray(b.end)
        u = (np.arange(samples) + 0.5) / samples
        pts = s + u[:, None] * (e - s)
        inside = np.zeros(samples, bool)
        for k in kept_branches:
            inside |= _capsule_distance(pts, k) <= k.radius
        total += inside.mean() * float(np.linalg.norm((e - s) * sp))
    return total
