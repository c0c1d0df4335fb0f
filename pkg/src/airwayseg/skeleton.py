"""Centreline extraction and tree-graph analysis of binary masks.

The mask is thinned by distance-ordered homotopic thinning: simple voxels
(whose removal changes no topology) are deleted in order of increasing
distance to the background, and voxels with a single remaining neighbour are
kept as line ends. For a tube this leaves its centreline running up to the
centres of its end caps. The one-voxel-wide centreline is turned into a graph: endpoint voxels (one
26-neighbour) and clusters of junction voxels (three or more neighbours)
become nodes, runs of two-neighbour voxels become branches. Nodes of graph
degree two are contracted and short terminal spurs are pruned before
generations are assigned by traversal from the root.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy import ndimage
import heapq

from numba import njit

_CUBE = np.ones((3, 3, 3), dtype=bool)
_OFFSETS = np.array([(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dz, dy, dx) != (0, 0, 0)])


def _neighbour_tables():
    offs = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    adj26 = np.zeros((27, 27), dtype=np.uint8)
    adj6 = np.zeros((27, 27), dtype=np.uint8)
    for i, a in enumerate(offs):
        for j, b in enumerate(offs):
            d = [abs(a[k] - b[k]) for k in range(3)]
            if i != j and max(d) == 1:
                adj26[i, j] = 1
            if sum(d) == 1:
                adj6[i, j] = 1
    n18 = np.array([sum(map(abs, o)) in (1, 2) for o in offs], dtype=np.uint8)
    face = np.array([sum(map(abs, o)) == 1 for o in offs], dtype=np.uint8)
    return adj26, adj6, n18, face


_ADJ26, _ADJ6, _N18, _FACE = _neighbour_tables()


@njit(cache=True)
def _components(present, adj, seeds_required):
    """Count components of ``present`` under ``adj``; only those touching ``seeds_required`` if given."""
    label = np.zeros(27, dtype=np.int64)
    stack = np.empty(27, dtype=np.int64)
    count = 0
    for s in range(27):
        if not present[s] or label[s]:
            continue
        cur = count + 1
        label[s] = cur
        top = 0
        stack[top] = s
        top += 1
        touches = False
        while top:
            top -= 1
            v = stack[top]
            if seeds_required is not None and seeds_required[v]:
                touches = True
            for w in range(27):
                if adj[v, w] and present[w] and not label[w]:
                    label[w] = cur
                    stack[top] = w
                    top += 1
        count += 1
        if seeds_required is not None and not touches:
            count -= 1
            # keep labels distinct from counted components
            for k in range(27):
                if label[k] == cur:
                    label[k] = -1
    return count


@njit(cache=True)
def _is_simple(nb, adj26, adj6, n18, face):
    fg = np.zeros(27, dtype=np.bool_)
    bg = np.zeros(27, dtype=np.bool_)
    for i in range(27):
        if i == 13:
            continue
        fg[i] = nb[i] != 0
        bg[i] = nb[i] == 0 and n18[i] != 0
    if _components(fg, adj26, None) != 1:
        return False
    seeds = np.zeros(27, dtype=np.bool_)
    for i in range(27):
        seeds[i] = face[i] != 0
    return _components(bg, adj6, seeds) == 1


@njit(cache=True)
def _thin_ordered(mask, dt, adj26, adj6, n18, face):
    """Distance-ordered thinning of a padded uint8 mask, in place."""
    nz, ny, nx = mask.shape
    strides = np.empty(27, dtype=np.int64)
    k = 0
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                strides[k] = dz * ny * nx + dy * nx + dx
                k += 1
    flat = mask.ravel()
    dflat = dt.ravel()
    queued = np.zeros(flat.size, dtype=np.uint8)
    heap = [(0.0, 0)]
    heap.pop()
    for idx in range(flat.size):
        if flat[idx] == 0:
            continue
        for f in (4, 10, 12, 14, 16, 22):
            if flat[idx + strides[f]] == 0:
                heap.append((dflat[idx], idx))
                queued[idx] = 1
                break
    heapq.heapify(heap)
    nb = np.zeros(27, dtype=np.uint8)
    while len(heap):
        d, idx = heapq.heappop(heap)
        queued[idx] = 0
        if flat[idx] == 0:
            continue
        n_fg = 0
        for i in range(27):
            nb[i] = flat[idx + strides[i]]
            if i != 13 and nb[i]:
                n_fg += 1
        if n_fg <= 1:
            continue
        if _is_simple(nb, adj26, adj6, n18, face):
            flat[idx] = 0
            for i in range(27):
                j = idx + strides[i]
                if i != 13 and flat[j] and not queued[j]:
                    queued[j] = 1
                    heapq.heappush(heap, (dflat[j], j))
    return mask


def thin(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """One-voxel-wide, topology-preserving centreline of a boolean mask."""
    data = np.asarray(mask, dtype=bool)
    padded = np.pad(data, 1).astype(np.uint8)
    dt = ndimage.distance_transform_edt(padded, sampling=spacing).astype(np.float64)
    _thin_ordered(padded, dt, _ADJ26, _ADJ6, _N18, _FACE)
    return padded[1:-1, 1:-1, 1:-1].astype(bool)


@dataclass
class Branch:
    voxels: np.ndarray  # (n, 3) ordered path, node voxels included at both ends
    length: float  # mm
    generation: int = -1
    mean_radius: float = 0.0
    nodes: tuple = (-1, -1)


@dataclass
class TreeSkeleton:
    """Centreline graph of a mask."""

    voxels: np.ndarray
    branches: list
    endpoints: list
    branch_points: list
    spacing: tuple = (1.0, 1.0, 1.0)
    shape: tuple = ()
    root: tuple | None = None
    node_coords: dict = field(default_factory=dict)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def total_length(self) -> float:
        return float(sum(b.length for b in self.branches))

    @property
    def generations(self) -> list:
        return [b.generation for b in self.branches]

    def voxel_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        if len(self.voxels):
            out[tuple(self.voxels.T)] = True
        return out

    def is_empty(self) -> bool:
        return len(self.voxels) == 0


def step_lengths(voxels: np.ndarray, spacing) -> np.ndarray:
    """Physical length of each step along a voxel path.

    Interior path voxels are replaced by the mean of themselves and their two
    path neighbours before measuring, which removes most of the staircase
    overestimate on oblique runs; the two end voxels stay fixed.
    """
    v = np.asarray(voxels, dtype=float)
    if len(v) < 2:
        return np.zeros(0)
    if len(v) > 2:
        v = v.copy()
        v[1:-1] = (v[:-2] + v[1:-1] + v[2:]) / 3.0
    return np.linalg.norm(np.diff(v, axis=0) * np.asarray(spacing, dtype=float), axis=1)


def path_length(voxels: np.ndarray, spacing) -> float:
    return float(step_lengths(voxels, spacing).sum())


class _Graph:
    """Multigraph of skeleton nodes with voxel paths on the edges."""

    def __init__(self):
        self.nodes = {}  # id -> representative voxel
        self.edges = {}  # id -> [u, v, path(list of voxels)]
        self._next_edge = 0

    def add_edge(self, u, v, path):
        self.edges[self._next_edge] = [u, v, list(path)]
        self._next_edge += 1

    def incident(self, n):
        return [e for e, (u, v, _) in self.edges.items() if u == n or v == n]

    def degree(self, n):
        return sum((u == n) + (v == n) for u, v, _ in self.edges.values())

    def contract(self, protected=()):
        """Merge the two edges at every degree-2 node."""
        changed = True
        while changed:
            changed = False
            for n in list(self.nodes):
                if n in protected:
                    continue
                inc = self.incident(n)
                if len(inc) != 2 or self.degree(n) != 2:
                    continue
                e1, e2 = inc
                u1, v1, p1 = self.edges[e1]
                u2, v2, p2 = self.edges[e2]
                # orient p1 to end at n and p2 to start at n
                a = v1 if u1 == n else u1
                if u1 == n:
                    p1 = p1[::-1]
                b = v2 if u2 == n else u2
                if v2 == n:
                    p2 = p2[::-1]
                del self.edges[e1], self.edges[e2]
                del self.nodes[n]
                self.add_edge(a, b, p1 + p2[1:])
                changed = True


def _build_graph(skel: np.ndarray, spacing) -> _Graph:
    counts = ndimage.convolve(skel.astype(np.uint8), _CUBE.astype(np.uint8), mode="constant") - 1
    degree = np.where(skel, counts, 0)
    spacing = np.asarray(spacing, dtype=float)

    # node labels: junction clusters first, then endpoints
    junction = skel & (degree >= 3)
    node_lab, n_nodes = ndimage.label(junction, structure=_CUBE)
    node_lab = node_lab.astype(np.int64)
    for p in np.argwhere(skel & (degree <= 1)):
        n_nodes += 1
        node_lab[tuple(p)] = n_nodes

    graph = _Graph()
    for n, sl in enumerate(ndimage.find_objects(node_lab), start=1):
        pts = np.argwhere(node_lab[sl] == n) + np.array([s.start for s in sl])
        centre = pts.mean(axis=0)
        graph.nodes[n] = tuple(int(c) for c in pts[np.argmin(np.linalg.norm(pts - centre, axis=1))])

    chains = skel & (node_lab == 0)
    chain_lab, n_chains = ndimage.label(chains, structure=_CUBE)
    for c, sl in enumerate(ndimage.find_objects(chain_lab), start=1):
        if sl is None:
            continue
        lo = np.array([max(s.start - 1, 0) for s in sl])
        box = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in sl)
        member = chain_lab[box] == c
        touching = ndimage.binary_dilation(member, structure=_CUBE) & (node_lab[box] > 0)
        pts = [tuple(int(v) for v in p + lo) for p in np.argwhere(member)]
        g = nx.Graph()
        g.add_nodes_from(pts)
        pset = set(pts)
        for p in pts:
            for off in _OFFSETS:
                q = (p[0] + off[0], p[1] + off[1], p[2] + off[2])
                if q in pset:
                    g.add_edge(p, q, weight=float(np.linalg.norm(off * spacing)))
        # entry voxels of the chain next to each touching node
        ends = {}
        for q in np.argwhere(touching):
            q = tuple(int(v) for v in q + lo)
            n = int(node_lab[q])
            for off in _OFFSETS:
                r = (q[0] + off[0], q[1] + off[1], q[2] + off[2])
                if r in pset:
                    ends.setdefault(n, []).append(r)
        nodes = sorted(ends)
        if len(nodes) == 0:
            # closed loop with no junction: anchor a node on it
            n_nodes += 1
            graph.nodes[n_nodes] = pts[0]
            graph.add_edge(n_nodes, n_nodes, pts + [pts[0]])
            continue
        if len(nodes) == 1:
            u = v = nodes[0]
            cand = ends[u]
            a, b = cand[0], max(cand, key=lambda r: np.linalg.norm(np.subtract(r, cand[0])))
        else:
            u, v = nodes[0], nodes[1]
            a, b = ends[u][0], ends[v][0]
        inner = nx.shortest_path(g, a, b, weight="weight") if a != b else [a]
        graph.add_edge(u, v, _dedupe([graph.nodes[u]] + inner + [graph.nodes[v]]))

    # node clusters touching each other directly
    linked = {frozenset((u, v)) for u, v, _ in graph.edges.values()}
    for p in np.argwhere(node_lab > 0):
        p = tuple(int(v) for v in p)
        n = int(node_lab[p])
        for off in _OFFSETS:
            q = (p[0] + off[0], p[1] + off[1], p[2] + off[2])
            if not all(0 <= q[i] < skel.shape[i] for i in range(3)):
                continue
            m = int(node_lab[q])
            if m and m != n and frozenset((n, m)) not in linked:
                linked.add(frozenset((n, m)))
                graph.add_edge(n, m, _dedupe([graph.nodes[n], p, q, graph.nodes[m]]))
    return graph


def _dedupe(path):
    out = []
    for p in path:
        if not out or out[-1] != p:
            out.append(p)
    return out


def _prune(graph: _Graph, dt: np.ndarray, spacing, factor: float, min_length: float):
    """Remove terminal edges shorter than ``factor`` x local radius + ``min_length``."""
    changed = True
    while changed:
        changed = False
        if len(graph.edges) <= 1:
            return
        for e, (u, v, path) in list(graph.edges.items()):
            du, dv = graph.degree(u), graph.degree(v)
            if not ((du == 1) ^ (dv == 1)):
                continue
            leaf, hub = (u, v) if du == 1 else (v, u)
            if graph.degree(hub) < 3:
                continue
            hub_radius = float(dt[graph.nodes[hub]])
            if path_length(np.asarray(path), spacing) < factor * hub_radius + min_length:
                del graph.edges[e]
                del graph.nodes[leaf]
                changed = True
                break
        if changed:
            graph.contract()


def _break_small_loops(graph: _Graph, dt: np.ndarray, spacing, factor: float = 4.0, slack: float = 4.0):
    """Open cycles shorter than ``factor`` x local radius + ``slack`` by dropping their longest edge.

    Such loops come from one-voxel tunnels in thin digitised tubes rather than
    from the tree itself.
    """
    while True:
        g = nx.MultiGraph()
        for e, (u, v, path) in graph.edges.items():
            g.add_edge(u, v, key=e, length=path_length(np.asarray(path), spacing))
        cycles = []
        for e, (u, v, path) in graph.edges.items():
            if u == v:
                cycles.append([e])
        seen = {}
        for e, (u, v, _) in graph.edges.items():
            if u != v:
                seen.setdefault(frozenset((u, v)), []).append(e)
        cycles += [es for es in seen.values() if len(es) > 1]
        simple = nx.Graph(g)
        for cyc in nx.cycle_basis(simple):
            if len(cyc) < 3:
                continue
            es = []
            for a, b in zip(cyc, cyc[1:] + cyc[:1]):
                es.append(min(seen[frozenset((a, b))], key=lambda e: g.edges[a, b, e]["length"]))
            cycles.append(es)
        broken = False
        for es in cycles:
            paths = [np.asarray(graph.edges[e][2]) for e in es]
            total = sum(path_length(p, spacing) for p in paths)
            radius = max(float(dt[tuple(p.T)].max()) for p in paths)
            if total < factor * radius + slack:
                longest = max(es, key=lambda e: path_length(np.asarray(graph.edges[e][2]), spacing))
                del graph.edges[longest]
                broken = True
                break
        if not broken:
            return
        for n in [n for n in graph.nodes if graph.degree(n) == 0 and len(graph.nodes) > 1]:
            del graph.nodes[n]
        graph.contract()


def skeletonize(mask, prune_factor: float = 1.0, prune_min: float = 2.0) -> TreeSkeleton:
    """Thin ``mask`` and extract a branch graph with generations.

    The root is the endpoint of the branch with the largest mean distance-
    transform radius (the widest tube); ties go to the endpoint on the lowest
    slice index. A mask with several components is processed component by
    component and only the largest component receives generations from its
    own root; others are rooted independently.
    """
    data = np.asarray(getattr(mask, "data", mask), dtype=bool)
    spacing = tuple(getattr(mask, "spacing", (1.0, 1.0, 1.0)))
    shape = data.shape
    if not data.any():
        return TreeSkeleton(np.zeros((0, 3), dtype=int), [], [], [], spacing, shape)

    skel = thin(data, spacing)
    if not skel.any():
        # thinning removed everything (tiny blob): keep the most interior voxel
        dt0 = ndimage.distance_transform_edt(data)
        skel = np.zeros_like(data)
        skel[np.unravel_index(np.argmax(dt0), shape)] = True
    dt = ndimage.distance_transform_edt(data, sampling=spacing)

    graph = _build_graph(skel, spacing)
    graph.contract()
    _break_small_loops(graph, dt, spacing)
    _prune(graph, dt, spacing, prune_factor, prune_min)

    branches, node_ids = [], {}
    for e, (u, v, path) in graph.edges.items():
        arr = np.asarray(path, dtype=int)
        node_ids.setdefault(u, len(node_ids))
        node_ids.setdefault(v, len(node_ids))
        radius = float(dt[tuple(arr.T)].mean()) if len(arr) else 0.0
        branches.append(Branch(arr, path_length(arr, spacing), -1, radius, (node_ids[u], node_ids[v])))

    deg = {}
    for b in branches:
        for n in b.nodes:
            deg[n] = deg.get(n, 0) + 1
    inv = {i: graph.nodes[n] for n, i in node_ids.items()}
    # isolated single-voxel skeletons have nodes without edges
    if not branches:
        pts = [tuple(int(c) for c in p) for p in np.argwhere(skel)]
        return TreeSkeleton(np.argwhere(skel), [], pts[:1], [], spacing, shape, pts[0])

    endpoints = [inv[n] for n, d in deg.items() if d == 1]
    branch_points = [inv[n] for n, d in deg.items() if d >= 3]
    root = _assign_generations(branches, deg, inv)

    kept = np.unique(np.concatenate([b.voxels for b in branches]), axis=0)
    return TreeSkeleton(kept, branches, endpoints, branch_points, spacing, shape, root, inv)


def _assign_generations(branches, deg, inv):
    adj = {}
    for i, b in enumerate(branches):
        u, v = b.nodes
        adj.setdefault(u, []).append((i, v))
        adj.setdefault(v, []).append((i, u))

    unassigned = set(range(len(branches)))
    root_coord = None
    while unassigned:
        # root each connected piece at the widest terminal branch
        candidates = []
        for i in unassigned:
            b = branches[i]
            for n in b.nodes:
                if deg[n] == 1:
                    candidates.append((-round(b.mean_radius, 6), inv[n][0], inv[n], n))
        if not candidates:
            i = min(unassigned, key=lambda i: (-branches[i].mean_radius, branches[i].voxels[:, 0].min()))
            n = branches[i].nodes[0]
            candidates.append((0, 0, inv[n], n))
        candidates.sort()
        _, _, coord, root = candidates[0]
        if root_coord is None:
            root_coord = coord
        depth = {root: 0}
        queue = deque([root])
        while queue:
            n = queue.popleft()
            for i, m in adj.get(n, []):
                if i in unassigned:
                    branches[i].generation = depth[n]
                    unassigned.discard(i)
                if m not in depth:
                    depth[m] = depth[n] + 1
                    queue.append(m)
    return root_coord
