"""Dual-edge patch graph: spatial kNN edges plus semantic top-k cosine edges.

An edge ``(i, j)`` of either type means ``j`` belongs to the neighborhood
``N_t(i)``; messages flow from ``j`` into ``i``.  Both edge sets are stored as
CSR rows keyed by ``i`` with neighbor lists sorted ascending.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPATIAL, SEMANTIC = "s", "m"
EDGE_TYPES = (SPATIAL, SEMANTIC)
BRUTE_FORCE_LIMIT = 50_000
_ROW_CHUNK = 1024
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class GraphConfig:
    k_spatial: int = 6
    k_semantic: int = 8

    def __post_init__(self):
        if self.k_spatial < 1 or self.k_semantic < 1:
            raise ValueError(f"k_spatial and k_semantic must be >= 1, got {self.k_spatial}, {self.k_semantic}")


@dataclass(frozen=True, eq=False)
class DualEdgeGraph:
    node_count: int
    spatial_offsets: np.ndarray
    spatial_nbrs: np.ndarray
    semantic_offsets: np.ndarray
    semantic_nbrs: np.ndarray

    def csr(self, edge_type: str) -> tuple[np.ndarray, np.ndarray]:
        if edge_type == SPATIAL:
            return self.spatial_offsets, self.spatial_nbrs
        if edge_type == SEMANTIC:
            return self.semantic_offsets, self.semantic_nbrs
        raise KeyError(edge_type)

    def neighbors(self, edge_type: str, i: int) -> np.ndarray:
        offsets, nbrs = self.csr(edge_type)
        return nbrs[offsets[i]:offsets[i + 1]]

    def degrees(self, edge_type: str) -> np.ndarray:
        return np.diff(self.csr(edge_type)[0])

    def edges(self, edge_type: str) -> np.ndarray:
        offsets, nbrs = self.csr(edge_type)
        rows = np.repeat(np.arange(self.node_count), np.diff(offsets))
        return np.stack([rows, nbrs], axis=1)

    def edge_count(self, edge_type: str | None = None) -> int:
        if edge_type is None:
            return len(self.spatial_nbrs) + len(self.semantic_nbrs)
        return len(self.csr(edge_type)[1])

    def __eq__(self, other):
        if not isinstance(other, DualEdgeGraph):
            return NotImplemented
        return (self.node_count == other.node_count
                and all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays())))

    def _arrays(self):
        return (self.spatial_offsets, self.spatial_nbrs, self.semantic_offsets, self.semantic_nbrs)

    def permuted(self, perm: np.ndarray) -> "DualEdgeGraph":
        """Relabel nodes so that old node ``perm[k]`` becomes new node ``k``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        parts = {}
        for t in EDGE_TYPES:
            e = self.edges(t)
            parts[t] = inv[e]
        return assemble_graph(parts[SPATIAL], parts[SEMANTIC], self.node_count)


def _select_smallest(dist: np.ndarray, k: int) -> np.ndarray:
    """Per row, the ``k`` column indices with smallest ``dist``; ties go to the lower index.

    Excluded entries must be ``inf`` and each row needs at least ``k`` finite values.
    """
    R = dist.shape[0]
    if k == 0:
        return np.empty((R, 0), dtype=np.int64)
    kth = np.partition(dist, k - 1, axis=1)[:, k - 1:k]
    r, c = np.nonzero(dist <= kth)
    order = np.lexsort((c, dist[r, c], r))
    r, c = r[order], c[order]
    starts = np.searchsorted(r, np.arange(R))
    rank = np.arange(len(r)) - starts[r]
    return c[rank < k].reshape(R, k).astype(np.int64)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _spatial_knn_brute(centers: np.ndarray, k: int) -> np.ndarray:
    N = len(centers)
    out = np.empty((N, k), dtype=np.int64)
    for lo in range(0, N, _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, N)
        d = _sq_dists(centers[lo:hi], centers)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = _select_smallest(d, k)
    return out


def _spatial_knn_grid(centers: np.ndarray, k: int) -> np.ndarray:
    """Uniform-grid bucket search with an exactness certificate per query."""
    N = len(centers)
    lo = centers.min(axis=0)
    extent = centers.max(axis=0) - lo
    # flat or collinear point sets would otherwise shrink the cell towards zero
    extent = np.maximum(extent, max(extent.max() * 1e-3, 1e-12))
    cell = (float(np.prod(extent)) * max(k, 1) / N) ** (1.0 / 3.0)
    while np.prod(np.floor(extent / cell) + 1) > 8 * N + 8:
        cell *= 2.0
    cell_idx = np.floor((centers - lo) / cell).astype(np.int64)
    dims = cell_idx.max(axis=0) + 1
    flat = np.ravel_multi_index(cell_idx.T, dims)
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    uniq, starts, counts = np.unique(sorted_flat, return_index=True, return_counts=True)
    bucket = {int(u): order[s:s + c] for u, s, c in zip(uniq, starts, counts)}

    out = np.empty((N, k), dtype=np.int64)
    for u in bucket:
        members = bucket[u]
        base = np.array(np.unravel_index(u, dims))
        pending = members
        radius = 1
        while len(pending):
            lo_c = np.maximum(base - radius, 0)
            hi_c = np.minimum(base + radius, dims - 1)
            rng = [np.arange(lo_c[a], hi_c[a] + 1) for a in range(3)]
            gz, gy, gx = np.meshgrid(*rng, indexing="ij")
            keys = np.ravel_multi_index((gz.ravel(), gy.ravel(), gx.ravel()), dims)
            cand = [bucket[int(key)] for key in keys if int(key) in bucket]
            cand = np.sort(np.concatenate(cand))
            covers_all = bool(np.all(lo_c == 0) and np.all(hi_c == dims - 1))
            if len(cand) - 1 < k and not covers_all:
                radius += 1
                continue
            d = _sq_dists(centers[pending], centers[cand])
            d[cand[None, :] == pending[:, None]] = np.inf
            local = _select_smallest(d, k)
            picked = cand[local]
            kth_d = np.take_along_axis(d, local[:, -1:], axis=1)[:, 0]
            certified = covers_all | (np.sqrt(kth_d) <= radius * cell)
            out[pending[certified]] = picked[certified]
            pending = pending[~certified]
            radius += 1
    return out


def build_spatial_edges(centers: np.ndarray, k_spatial: int, method: str = "auto") -> np.ndarray:
    """kNN on patch centers, union-symmetrized, with one self-loop per node.

    Returns an ``(E, 2)`` array of ``(i, j)`` pairs sorted by ``i`` then ``j``.
    """
    centers = np.asarray(centers, dtype=float)
    N = len(centers)
    k = min(k_spatial, N - 1)
    if method == "auto":
        method = "brute" if N <= BRUTE_FORCE_LIMIT else "grid"
    if k > 0:
        nbrs = _spatial_knn_brute(centers, k) if method == "brute" else _spatial_knn_grid(centers, k)
        rows = np.repeat(np.arange(N), k)
        directed = np.stack([rows, nbrs.ravel()], axis=1)
    else:
        directed = np.empty((0, 2), dtype=np.int64)
    loops = np.repeat(np.arange(N)[:, None], 2, axis=1)
    edges = np.concatenate([directed, directed[:, ::-1], loops])
    return _dedup(edges, N)


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < _NORM_EPS or nv < _NORM_EPS:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na[:, None] * nb[None, :]
    ok = (na[:, None] >= _NORM_EPS) & (nb[None, :] >= _NORM_EPS)
    return np.where(ok, (a @ b.T) / np.where(ok, denom, 1.0), 0.0)


def build_semantic_edges(features: np.ndarray, k_semantic: int) -> np.ndarray:
    """Directed top-k cosine neighbors per node, excluding the node itself."""
    features = np.asarray(features, dtype=float)
    N = len(features)
    k = min(k_semantic, N - 1)
    if k <= 0:
        return np.empty((0, 2), dtype=np.int64)
    # BLAS results depend on column position, so duplicated rows would not tie
    # exactly; scoring against distinct rows keeps equal vectors bitwise equal
    distinct, inverse = np.unique(features, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    out = np.empty((N, k), dtype=np.int64)
    for lo in range(0, N, _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, N)
        d = -cosine_matrix(features[lo:hi], distinct)[:, inverse]
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = _select_smallest(d, k)
    rows = np.repeat(np.arange(N), k)
    return _dedup(np.stack([rows, out.ravel()], axis=1), N)


def _dedup(edges: np.ndarray, N: int) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    keys = np.unique(edges[:, 0] * N + edges[:, 1])
    return np.stack([keys // N, keys % N], axis=1)


def _to_csr(edges: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    edges = _dedup(edges, N)
    offsets = np.zeros(N + 1, dtype=np.int64)
    np.cumsum(np.bincount(edges[:, 0], minlength=N), out=offsets[1:])
    return offsets, edges[:, 1].copy()


def assemble_graph(spatial_edges, semantic_edges, node_count: int) -> DualEdgeGraph:
    """Build the CSR graph.  Spatial edges are symmetrized and get self-loops here too (idempotent)."""
    N = int(node_count)
    sp = np.asarray(spatial_edges, dtype=np.int64).reshape(-1, 2)
    sm = np.asarray(semantic_edges, dtype=np.int64).reshape(-1, 2)
    for name, e in (("spatial", sp), ("semantic", sm)):
        if e.size and (e.min() < 0 or e.max() >= N):
            raise ValueError(f"{name} edge index out of range for {N} nodes")
    loops = np.repeat(np.arange(N)[:, None], 2, axis=1)
    sp = np.concatenate([sp, sp[:, ::-1], loops])
    s_off, s_nbr = _to_csr(sp, N)
    m_off, m_nbr = _to_csr(sm, N)
    for arr in (s_off, s_nbr, m_off, m_nbr):
        arr.flags.writeable = False
    return DualEdgeGraph(N, s_off, s_nbr, m_off, m_nbr)


def build_graph(centers: np.ndarray, features: np.ndarray, config: GraphConfig = GraphConfig()) -> DualEdgeGraph:
    N = len(centers)
    if N < 1 or len(features) != N:
        raise ValueError("need at least one node and one feature row per center")
    return assemble_graph(build_spatial_edges(centers, config.k_spatial),
                          build_semantic_edges(features, config.k_semantic), N)


def dump_edges(graph: DualEdgeGraph) -> str:
    rows = []
    for t in EDGE_TYPES:
        rows.extend((t, int(i), int(j)) for i, j in graph.edges(t))
    rows.sort()
    lines = [f"# nodes {graph.node_count}"] + [f"{t} {i} {j}" for t, i, j in rows]
    return "\n".join(lines) + "\n"


def load_edges(text: str) -> DualEdgeGraph:
    node_count = None
    parts = {SPATIAL: [], SEMANTIC: []}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            if len(fields) == 2 and fields[0] == "nodes":
                node_count = int(fields[1])
            continue
        t, i, j = line.split()
        if t not in parts:
            raise ValueError(f"line {lineno}: unknown edge type {t!r}")
        parts[t].append((int(i), int(j)))
    if node_count is None:
        raise ValueError("edge dump lacks the '# nodes N' header")
    return assemble_graph(np.array(parts[SPATIAL]).reshape(-1, 2),
                          np.array(parts[SEMANTIC]).reshape(-1, 2), node_count)
