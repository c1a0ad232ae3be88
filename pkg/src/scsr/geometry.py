"""Icosphere meshes and synthetic parcellations.

Meshes are built by repeated 1-to-4 subdivision of a golden-ratio icosahedron.
Midpoint vertices are appended after their parents, so the vertices of an
order-``o`` mesh are a prefix of the order-``o + 1`` mesh.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import sparse

from . import kernels
from .errors import BoundsError, ConfigurationError

MAX_ORDER = 7

_PHI = (1.0 + 5.0 ** 0.5) / 2.0

_BASE_VERTICES = np.array(
    [
        [-1.0, _PHI, 0.0],
        [1.0, _PHI, 0.0],
        [-1.0, -_PHI, 0.0],
        [1.0, -_PHI, 0.0],
        [0.0, -1.0, _PHI],
        [0.0, 1.0, _PHI],
        [0.0, -1.0, -_PHI],
        [0.0, 1.0, -_PHI],
        [_PHI, 0.0, -1.0],
        [_PHI, 0.0, 1.0],
        [-_PHI, 0.0, -1.0],
        [-_PHI, 0.0, 1.0],
    ]
)

_BASE_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def n_vertices(order):
    return 10 * 4 ** order + 2


@dataclass(frozen=True, eq=False)
class IcosphereMesh:
    order: int
    vertices: np.ndarray  # (V, 3) float64, unit norm
    faces: np.ndarray  # (F, 3) int64

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @cached_property
    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def adjacency_csr(self):
        e = self.edges
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        mat = sparse.csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
        mat.sort_indices()
        return mat

    @property
    def adjacency(self):
        """Per-vertex neighbour index arrays (sorted ascending)."""
        a = self.adjacency_csr
        return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.n_vertices)]

    def neighbors(self, v):
        a = self.adjacency_csr
        return a.indices[a.indptr[v]:a.indptr[v + 1]]

    def hop_distance(self, sources):
        """Hop distance from the vertex set ``sources`` to every vertex."""
        a = self.adjacency_csr
        dist = np.full(self.n_vertices, -1, dtype=np.int64)
        frontier = np.unique(np.asarray(list(sources), dtype=np.int64))
        dist[frontier] = 0
        d = 0
        while frontier.size:
            d += 1
            nb = np.unique(a[frontier].indices)
            nb = nb[dist[nb] == -1]
            dist[nb] = d
            frontier = nb
        return dist

    def smooth(self, values, passes=1):
        """Iterated averaging of each vertex with its neighbours.

        ``values`` may be (V,) or (V, k).
        """
        a = self.adjacency_csr.astype(np.float64) + sparse.identity(self.n_vertices, format="csr")
        deg = np.asarray(a.sum(axis=1)).ravel()
        op = sparse.diags(1.0 / deg) @ a
        out = np.asarray(values, dtype=np.float64)
        for _ in range(passes):
            out = op @ out
        return out


def build_icosphere(order):
    if not 0 <= order <= MAX_ORDER or int(order) != order:
        raise BoundsError(f"icosphere order must be in [0, {MAX_ORDER}], got {order}")
    verts = _BASE_VERTICES / np.linalg.norm(_BASE_VERTICES, axis=1, keepdims=True)
    faces = _BASE_FACES.copy()
    for _ in range(int(order)):
        verts, faces = _subdivide(verts, faces)
    verts.setflags(write=False)
    faces.setflags(write=False)
    return IcosphereMesh(order=int(order), vertices=verts, faces=faces)


def _subdivide(verts, faces):
    n = verts.shape[0]
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    uniq, inverse = np.unique(e, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    mid = verts[uniq[:, 0]] + verts[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    nf = faces.shape[0]
    ab = n + inverse[:nf]
    bc = n + inverse[nf:2 * nf]
    ca = n + inverse[2 * nf:]
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.stack(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return np.vstack([verts, mid]), new_faces


@dataclass(frozen=True, eq=False)
class Parcellation:
    labels: np.ndarray  # (V,) int64 in [0, k)
    k: int
    roi_sets: dict = field(default_factory=dict)  # name -> frozenset of parcel ids

    @property
    def n_vertices(self):
        return self.labels.size

    def parcel_sizes(self):
        return np.bincount(self.labels, minlength=self.k)

    def roi_mask(self, name):
        """Boolean vertex mask of a named ROI (``"cortex"`` is every vertex)."""
        if name == "cortex" and name not in self.roi_sets:
            return np.ones(self.n_vertices, dtype=bool)
        try:
            ids = self.roi_sets[name]
        except KeyError:
            raise ConfigurationError(f"unknown ROI {name!r}") from None
        return np.isin(self.labels, np.fromiter(ids, dtype=np.int64, count=len(ids)))

    def parcel_means(self, values):
        """Unweighted vertex average within each parcel; works on (V,) or (n, V)."""
        values = np.asarray(values, dtype=np.float64)
        sizes = self.parcel_sizes()
        if values.ndim == 1:
            return np.bincount(self.labels, weights=values, minlength=self.k) / sizes
        onehot = sparse.csr_matrix(
            (np.ones(self.n_vertices), (np.arange(self.n_vertices), self.labels)),
            shape=(self.n_vertices, self.k),
        )
        return np.asarray(values @ onehot) / sizes


def generate_parcellation(mesh, k, seed):
    """Split the mesh into ``k`` connected parcels.

    Seeds are placed by farthest-point sampling on the sphere starting from a
    vertex drawn with ``seed``; every vertex then joins the seed with the
    smallest hop distance, ties going to the earlier seed.
    """
    n = mesh.n_vertices
    if not 1 <= k <= n:
        raise BoundsError(f"parcel count must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    seeds = [first]
    closest = mesh.vertices @ mesh.vertices[first]  # max cosine to any seed
    closest[first] = np.inf
    for _ in range(k - 1):
        nxt = int(np.argmin(closest))
        seeds.append(nxt)
        np.maximum(closest, mesh.vertices @ mesh.vertices[nxt], out=closest)
        closest[nxt] = np.inf
    a = mesh.adjacency_csr
    labels = kernels.hop_voronoi(a.indptr, a.indices, np.array(seeds, dtype=np.int64))
    labels.setflags(write=False)
    return Parcellation(labels=labels, k=int(k))


def define_roi(parcellation, parcel_ids, name):
    ids = frozenset(int(i) for i in parcel_ids)
    bad = [i for i in ids if not 0 <= i < parcellation.k]
    if bad:
        raise BoundsError(f"parcel ids out of range [0, {parcellation.k}): {sorted(bad)}")
    rois = dict(parcellation.roi_sets)
    rois[name] = ids
    return replace(parcellation, roi_sets=rois)


def contiguous_roi(mesh, parcellation, n_parcels, anchor=(0.0, -0.35, -0.94)):
    """Parcel ids of the ``n_parcels`` parcels whose centroids lie closest to ``anchor``.

    Used to place a compact synthetic disease ROI; the default anchor points
    at an arbitrary fixed spot on the sphere.
    """
    if not 1 <= n_parcels <= parcellation.k:
        raise BoundsError(f"n_parcels must be in [1, {parcellation.k}]")
    anchor = np.asarray(anchor, dtype=np.float64)
    anchor = anchor / np.linalg.norm(anchor)
    cent = np.stack([parcellation.parcel_means(mesh.vertices[:, j]) for j in range(3)], axis=1)
    order = np.argsort(-(cent @ anchor), kind="stable")
    return sorted(int(i) for i in order[:n_parcels])
