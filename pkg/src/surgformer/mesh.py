"""Tetrahedral meshes, element-edge graphs, surfaces and graph Laplacians."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations, permutations, product
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "MeshError",
    "TetMesh",
    "EdgeList",
    "SurfaceInfo",
    "load_mesh",
    "save_mesh",
    "mesh_to_json",
    "generate_bar_mesh",
    "signed_volumes",
    "build_edges",
    "extract_surface",
    "graph_laplacian",
    "surface_edges",
    "MeshSymmetry",
    "mesh_symmetries",
]

_MESH_KEYS = ("vertices", "tets", "fixed")
# local vertex pairs of a tetrahedron
_TET_PAIRS = np.array(list(combinations(range(4), 2)))
# face k is opposite local vertex k
_TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class TetMesh:
    vertices: np.ndarray  # (N, 3) float64, meters
    tets: np.ndarray  # (T, 4) int64, positively oriented
    fixed_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_nodes(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_tets(self) -> int:
        return int(self.tets.shape[0])

    def fixed_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.fixed_nodes] = True
        return mask


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = vertices[tets]
    a, b, c = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def _validated(vertices, tets, fixed) -> TetMesh:
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshError(f"vertices must be (N, 3), got {vertices.shape}")
    tets = np.ascontiguousarray(tets, dtype=np.int64).reshape(-1, 4)
    fixed = np.unique(np.asarray(fixed, dtype=np.int64))
    n = vertices.shape[0]
    bad = np.flatnonzero(((tets < 0) | (tets >= n)).any(axis=1))
    if bad.size:
        raise MeshError(f"tet {bad[0]} has a vertex index out of range [0, {n})")
    srt = np.sort(tets, axis=1)
    dup = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
    if dup.size:
        raise MeshError(f"tet {dup[0]} repeats a vertex index")
    if fixed.size and (fixed[0] < 0 or fixed[-1] >= n):
        raise MeshError("fixed node index out of range")
    if not np.isfinite(vertices).all():
        raise MeshError("vertex coordinates must be finite")

    vol = signed_volumes(vertices, tets)
    scale = np.ptp(vertices, axis=0).max() if n else 1.0
    zero = np.flatnonzero(np.abs(vol) <= 1e-14 * max(scale, 1e-300) ** 3)
    if zero.size:
        raise MeshError(f"tet {zero[0]} is degenerate (zero volume)")
    neg = vol < 0
    if neg.any():
        tets = tets.copy()
        tets[neg, 1], tets[neg, 2] = tets[neg, 2].copy(), tets[neg, 1].copy()
    return TetMesh(vertices, tets, fixed)


def make_mesh(vertices, tets, fixed=()) -> TetMesh:
    """Validate raw arrays into a TetMesh, reorienting inverted tets."""
    return _validated(vertices, tets, fixed)


def mesh_to_json(mesh: TetMesh) -> str:
    payload = {
        "vertices": mesh.vertices.tolist(),
        "tets": mesh.tets.tolist(),
        "fixed": mesh.fixed_nodes.tolist(),
    }
    return json.dumps(payload)


def save_mesh(mesh: TetMesh, path) -> None:
    Path(path).write_text(mesh_to_json(mesh), encoding="utf-8")


def load_mesh(path) -> TetMesh:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise MeshError("mesh file must hold a JSON object")
    keys = tuple(payload)
    unknown = set(keys) - set(_MESH_KEYS)
    if unknown:
        raise MeshError(f"unknown mesh fields: {sorted(unknown)}")
    if keys != _MESH_KEYS:
        raise MeshError(f"mesh fields must be exactly {list(_MESH_KEYS)} in order, got {list(keys)}")
    try:
        vertices = np.array(payload["vertices"], dtype=np.float64).reshape(-1, 3)
        tets = np.array(payload["tets"], dtype=np.int64).reshape(-1, 4)
        fixed = np.array(payload["fixed"], dtype=np.int64).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise MeshError(f"malformed mesh arrays: {exc}") from exc
    return _validated(vertices, tets, fixed)


def generate_bar_mesh(nx: int, ny: int, nz: int, extent=(1.0, 1.0, 1.0)) -> TetMesh:
    """Structured box split into six tets per cell, clamped on the x=0 face.

    Every cell uses the same Kuhn split along its (0,0,0)-(1,1,1) diagonal,
    which keeps shared faces conforming between neighbouring cells.
    """
    if min(nx, ny, nz) < 1:
        raise MeshError("nx, ny, nz must all be >= 1")
    ex, ey, ez = (float(e) for e in extent)
    if min(ex, ey, ez) <= 0:
        raise MeshError("extent must be positive")
    xs = np.linspace(0.0, ex, nx + 1)
    ys = np.linspace(0.0, ey, ny + 1)
    zs = np.linspace(0.0, ez, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def node(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    unit = np.eye(3, dtype=np.int64)
    tets = []
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        corner = np.zeros(3, dtype=np.int64)
        verts = [node(I, J, K)]
        for axis in perm:
            corner = corner + unit[axis]
            verts.append(node(I + corner[0], J + corner[1], K + corner[2]))
        tets.append(np.stack(verts, axis=1))
    # cell-major ordering
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    fixed = np.flatnonzero(np.isclose(vertices[:, 0], 0.0))
    return _validated(vertices, tets, fixed)


@dataclass(frozen=True)
class EdgeList:
    """Directed graph in compressed form, grouped by receiver.

    Edge ``e`` goes from ``senders[e]`` to ``receivers[e]``; receivers are
    sorted so each receiver's incoming edges occupy ``indptr[i]:indptr[i+1]``.
    """

    n: int
    indptr: np.ndarray
    senders: np.ndarray

    @property
    def receivers(self) -> np.ndarray:
        return np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))

    @property
    def n_edges(self) -> int:
        return int(self.senders.shape[0])

    @classmethod
    def from_pairs(cls, senders, receivers, n: int) -> "EdgeList":
        senders = np.asarray(senders, dtype=np.int64)
        receivers = np.asarray(receivers, dtype=np.int64)
        key = np.unique(receivers * n + senders)
        recv, send = np.divmod(key, n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(recv, minlength=n), out=indptr[1:])
        return cls(int(n), indptr, send.astype(np.int64))

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.senders.tolist(), self.receivers.tolist()))

    def without_self_loops(self) -> tuple[np.ndarray, np.ndarray]:
        s, r = self.senders, self.receivers
        keep = s != r
        return s[keep], r[keep]

    def adjacency(self) -> sp.csr_matrix:
        """Unweighted undirected adjacency, self-loops dropped."""
        s, r = self.without_self_loops()
        a = sp.csr_matrix((np.ones(s.size, dtype=np.int64), (r, s)), shape=(self.n, self.n))
        a = ((a + a.T) > 0).astype(np.int64)
        return a.tocsr()


def _undirected_with_loops(u: np.ndarray, v: np.ndarray, n: int) -> EdgeList:
    loops = np.arange(n, dtype=np.int64)
    senders = np.concatenate([u, v, loops])
    receivers = np.concatenate([v, u, loops])
    return EdgeList.from_pairs(senders, receivers, n)


def build_edges(mesh: TetMesh) -> EdgeList:
    pairs = mesh.tets[:, _TET_PAIRS].reshape(-1, 2)
    return _undirected_with_loops(pairs[:, 0], pairs[:, 1], mesh.n_nodes)


@dataclass(frozen=True)
class SurfaceInfo:
    triangles: np.ndarray  # (F, 3) outward oriented
    nodes: np.ndarray  # sorted surface node indices
    normals: np.ndarray  # (len(nodes), 3) unit outward normals

    def normal_of(self, node: int) -> np.ndarray:
        k = np.searchsorted(self.nodes, node)
        if k >= self.nodes.size or self.nodes[k] != node:
            raise KeyError(f"node {node} is not on the surface")
        return self.normals[k]

    def contains(self, node: int) -> bool:
        k = np.searchsorted(self.nodes, node)
        return bool(k < self.nodes.size and self.nodes[k] == node)


def extract_surface(mesh: TetMesh, active=None) -> SurfaceInfo:
    """Boundary faces of ``mesh`` restricted to the ``active`` tets (all by default)."""
    tets = mesh.tets if active is None else mesh.tets[np.asarray(active)]
    if tets.shape[0] == 0:
        raise MeshError("no tets to extract a surface from")
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    opposite = tets.reshape(-1)  # local vertex k is opposite face k
    key = np.sort(faces, axis=1)
    uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if (counts > 2).any():
        fid = int(np.flatnonzero(counts > 2)[0])
        raise MeshError(f"non-manifold face {fid} {uniq[fid].tolist()} shared by {counts[fid]} tets")
    boundary = counts[inverse] == 1
    tri = faces[boundary]
    apex = mesh.vertices[opposite[boundary]]
    p = mesh.vertices[tri]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    # flip faces whose normal points toward the opposite vertex of their tet
    flip = np.einsum("ij,ij->i", n, apex - p[:, 0]) > 0
    tri = tri.copy()
    tri[flip, 1], tri[flip, 2] = tri[flip, 2].copy(), tri[flip, 1].copy()
    n[flip] *= -1.0

    nodes = np.unique(tri)
    acc = np.zeros((mesh.n_nodes, 3))
    for k in range(3):
        np.add.at(acc, tri[:, k], n)  # |n| is twice the area: area weighting
    nn = acc[nodes]
    nn /= np.linalg.norm(nn, axis=1, keepdims=True)
    order = np.lexsort(tri.T[::-1])
    return SurfaceInfo(tri[order], nodes, nn)


def surface_edges(surface: SurfaceInfo, n: int) -> EdgeList:
    """Graph of surface triangle edges (with self-loops on every node)."""
    t = surface.triangles
    u = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    v = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    return _undirected_with_loops(u, v, n)


def graph_laplacian(edges: EdgeList, n: int | None = None) -> sp.csr_matrix:
    """Combinatorial Laplacian ``D - A`` (integer entries, self-loops ignored)."""
    n = edges.n if n is None else int(n)
    if n != edges.n:
        raise MeshError(f"edge list is over {edges.n} nodes, asked for {n}")
    a = edges.adjacency()
    deg = np.asarray(a.sum(axis=1)).ravel()
    return (sp.diags(deg, format="csr", dtype=np.int64) - a).tocsr()


@dataclass(frozen=True)
class MeshSymmetry:
    """Orthogonal map ``R`` about ``centre`` that sends node i to node ``perm[i]``."""

    R: np.ndarray
    centre: np.ndarray
    perm: np.ndarray

    def apply_field(self, F: np.ndarray, vector: bool = True) -> np.ndarray:
        """Transport a per-node field (..., N, C); vector fields are also rotated."""
        F = np.asarray(F)
        out = np.empty_like(F)
        out[..., self.perm, :] = F @ self.R.T.astype(F.dtype) if vector else F
        return out

    def apply_nodes(self, a: np.ndarray) -> np.ndarray:
        """Transport a per-node scalar array (..., N)."""
        a = np.asarray(a)
        out = np.empty_like(a)
        out[..., self.perm] = a
        return out


def mesh_symmetries(mesh: TetMesh, rtol: float = 1e-9) -> list[MeshSymmetry]:
    """Non-identity signed axis permutations mapping the mesh, tets, and clamp onto themselves.

    An isotropic elastic problem posed on such a mesh maps to another valid
    problem, so these give exact data augmentations.
    """
    from scipy.spatial import cKDTree

    V = mesh.vertices
    lo, hi = V.min(axis=0), V.max(axis=0)
    centre = (lo + hi) / 2
    tol = rtol * max(float(np.linalg.norm(hi - lo)), 1e-300)
    tree = cKDTree(V)
    tet_keys = {tuple(t) for t in np.sort(mesh.tets, axis=1).tolist()}
    fixed = set(mesh.fixed_nodes.tolist())
    out = []
    for axes in permutations(range(3)):
        for signs in product((1.0, -1.0), repeat=3):
            R = np.zeros((3, 3))
            R[np.arange(3), axes] = signs
            if np.array_equal(R, np.eye(3)):
                continue
            dist, perm = tree.query((V - centre) @ R.T + centre, distance_upper_bound=tol)
            if not np.isfinite(dist).all() or np.unique(perm).size != V.shape[0]:
                continue
            mapped = np.sort(perm[mesh.tets], axis=1).tolist()
            if any(tuple(t) not in tet_keys for t in mapped):
                continue
            if set(perm[mesh.fixed_nodes].tolist()) != fixed:
                continue
            out.append(MeshSymmetry(R, centre, perm.astype(np.int64)))
    return out
