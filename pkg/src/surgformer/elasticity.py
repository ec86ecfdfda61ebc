"""Quasistatic linear elasticity on tetrahedra, used to generate supervision.

Resection removes every tet whose four vertices lie on the negative side of
a level set; tets straddling the zero set stay intact. Tool contact is a
single prescribed nodal displacement on the active surface.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .mesh import TetMesh, extract_surface, SurfaceInfo

log = logging.getLogger(__name__)

__all__ = [
    "MaterialParams",
    "BoundarySpec",
    "ResectionState",
    "CutConfig",
    "SampleRecord",
    "Dataset",
    "SolverError",
    "UnconstrainedComponentWarning",
    "isotropic_elasticity",
    "element_stiffness",
    "assemble_stiffness",
    "solve_dirichlet",
    "sample_tool_interaction",
    "apply_resection",
    "active_node_mask",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

DATASET_MAGIC = b"SGF1"
DATASET_VERSION = 1
DIRECT_SOLVE_MAX_NODES = 2000


class SolverError(RuntimeError):
    pass


class UnconstrainedComponentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MaterialParams:
    E: float = 2100.0
    nu: float = 0.45

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError(f"Young's modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {self.nu}")

    @property
    def lame(self) -> tuple[float, float]:
        lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        mu = self.E / (2 * (1 + self.nu))
        return lam, mu


def isotropic_elasticity(mat: MaterialParams) -> np.ndarray:
    """6x6 Voigt matrix for strains ordered (xx, yy, zz, yz, xz, xy), engineering shear."""
    lam, mu = mat.lame
    C = np.zeros((6, 6))
    C[:3, :3] = lam
    C[np.arange(3), np.arange(3)] = lam + 2 * mu
    C[np.arange(3, 6), np.arange(3, 6)] = mu
    return C


def _shape_gradients(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the four linear shape functions, (T, 4, 3), and tet volumes."""
    M = np.concatenate([np.ones(X.shape[:2] + (1,)), X], axis=2)  # (T, 4, 4)
    vol = np.linalg.det(M) / 6.0
    if (np.abs(vol) < 1e-14).any():
        bad = int(np.flatnonzero(np.abs(vol) < 1e-14)[0])
        raise ValueError(f"element {bad} has degenerate volume {vol[bad]:.3e} m^3")
    inv = np.linalg.inv(M)
    return np.transpose(inv[:, 1:, :], (0, 2, 1)), vol


def _strain_matrices(grads: np.ndarray) -> np.ndarray:
    T = grads.shape[0]
    B = np.zeros((T, 6, 12))
    gx, gy, gz = grads[..., 0], grads[..., 1], grads[..., 2]
    for a in range(4):
        c = 3 * a
        B[:, 0, c] = gx[:, a]
        B[:, 1, c + 1] = gy[:, a]
        B[:, 2, c + 2] = gz[:, a]
        B[:, 3, c + 1], B[:, 3, c + 2] = gz[:, a], gy[:, a]
        B[:, 4, c], B[:, 4, c + 2] = gz[:, a], gx[:, a]
        B[:, 5, c], B[:, 5, c + 1] = gy[:, a], gx[:, a]
    return B


def element_stiffness(X: np.ndarray, mat: MaterialParams) -> np.ndarray:
    """Constant-strain tet stiffness; X is (T, 4, 3), result (T, 12, 12)."""
    grads, vol = _shape_gradients(np.asarray(X, dtype=np.float64))
    B = _strain_matrices(grads)
    C = isotropic_elasticity(mat)
    return np.abs(vol)[:, None, None] * np.einsum("tki,kl,tlj->tij", B, C, B)


def assemble_stiffness(mesh: TetMesh, mat: MaterialParams, active=None) -> sp.csr_matrix:
    """Global 3N x 3N stiffness over the active tets (boolean mask or index array)."""
    tets = mesh.tets if active is None else mesh.tets[np.asarray(active)]
    if tets.shape[0] == 0:
        raise SolverError("active domain is empty")
    Ke = element_stiffness(mesh.vertices[tets], mat)
    dofs = (3 * tets[:, :, None] + np.arange(3)).reshape(-1, 12)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    n = 3 * mesh.n_nodes
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


@dataclass
class BoundarySpec:
    """Zero-displacement nodes plus prescribed nonzero nodal displacements."""

    fixed: np.ndarray
    nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.fixed = np.asarray(self.fixed, dtype=np.int64).reshape(-1)
        self.nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 3)
        if self.values.shape[0] != self.nodes.size:
            raise ValueError("one displacement per prescribed node required")
        if np.intersect1d(self.fixed, self.nodes).size:
            raise ValueError("prescribed nodes must not be fixed")

    @classmethod
    def tool(cls, fixed, node: int, displacement) -> "BoundarySpec":
        return cls(fixed, [int(node)], np.asarray(displacement, dtype=np.float64).reshape(1, 3))

    @property
    def node(self) -> int:
        return int(self.nodes[0])

    @property
    def displacement(self) -> np.ndarray:
        return self.values[0]

    def scaled(self, lam: float) -> "BoundarySpec":
        return BoundarySpec(self.fixed, self.nodes, lam * self.values)


def _node_graph(K: sp.csr_matrix) -> sp.csr_matrix:
    n = K.shape[0] // 3
    coo = K.tocoo()
    g = sp.coo_matrix((np.ones(coo.nnz), (coo.row // 3, coo.col // 3)), shape=(n, n))
    return g.tocsr()


def solve_dirichlet(
    K: sp.csr_matrix,
    bc: BoundarySpec,
    active_nodes=None,
    forces=None,
    rtol: float = 1e-10,
    method: str = "auto",
) -> np.ndarray:
    """Solve K u = f with Dirichlet data; returns (N, 3) nodal displacements.

    Inactive nodes get zero. Active components without any prescribed node get
    zero and raise :class:`UnconstrainedComponentWarning`.
    """
    n = K.shape[0] // 3
    active = np.ones(n, dtype=bool) if active_nodes is None else np.asarray(active_nodes, dtype=bool)
    prescribed = np.zeros((n, 3))
    is_bc = np.zeros(n, dtype=bool)
    is_bc[bc.fixed] = True
    is_bc[bc.nodes] = True
    prescribed[bc.nodes] = bc.values
    if (is_bc & ~active)[bc.nodes].any():
        raise SolverError("prescribed displacement on an inactive node")

    n_comp, label = connected_components(_node_graph(K), directed=False)
    constrained = np.zeros(n_comp, dtype=bool)
    constrained[np.unique(label[is_bc & active])] = True
    loose = active & ~constrained[label]
    if loose.any():
        warnings.warn(
            f"{int(loose.sum())} active nodes lie in components without constraints; set to zero",
            UnconstrainedComponentWarning,
            stacklevel=2,
        )
    free_nodes = active & ~is_bc & constrained[label]
    free = (3 * np.flatnonzero(free_nodes)[:, None] + np.arange(3)).ravel()
    fixed_dofs = (3 * np.flatnonzero(is_bc & active)[:, None] + np.arange(3)).ravel()
    u = np.zeros(3 * n)
    u[fixed_dofs] = prescribed.reshape(-1)[fixed_dofs]
    if free.size:
        K = sp.csr_matrix(K)
        Kff = K[free][:, free].tocsc()
        rhs = -(K[free][:, fixed_dofs] @ u[fixed_dofs])
        if forces is not None:
            rhs = rhs + np.asarray(forces, dtype=np.float64).reshape(-1)[free]
        use_direct = method == "direct" or (method == "auto" and n <= DIRECT_SOLVE_MAX_NODES)
        if use_direct:
            try:
                uf = spla.splu(Kff).solve(rhs)
            except RuntimeError as exc:
                raise SolverError(f"singular reduced stiffness: {exc}") from exc
        else:
            diag = Kff.diagonal()
            if (diag <= 0).any():
                raise SolverError("non-positive diagonal in reduced stiffness")
            precond = sp.diags(1.0 / diag)
            uf, info = spla.cg(Kff, rhs, rtol=rtol, atol=0.0, maxiter=20 * free.size, M=precond)
            if info != 0:
                raise SolverError(f"conjugate gradient did not converge (info={info})")
        if not np.isfinite(uf).all():
            raise SolverError("non-finite displacement solution")
        u[free] = uf
    return u.reshape(n, 3)


def _cap_direction(normal: np.ndarray, half_angle: float, rng) -> np.ndarray:
    """Uniform direction on the spherical cap of ``half_angle`` around ``normal``."""
    cos_t = rng.uniform(np.cos(half_angle), 1.0)
    phi = rng.uniform(0.0, 2 * np.pi)
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    x, y, z = normal / math.sqrt(float(normal @ normal))
    # orthonormal frame (e1, e2) perpendicular to n, built without np.cross (hot path)
    if abs(x) < 0.9:
        e1 = np.array([0.0, z, -y])
    else:
        e1 = np.array([-z, 0.0, x])
    e1 /= math.sqrt(float(e1 @ e1))
    a, b, c = e1
    e2 = np.array([y * c - z * b, z * a - x * c, x * b - y * a])
    return cos_t * np.array([x, y, z]) + sin_t * (math.cos(phi) * e1 + math.sin(phi) * e2)


def sample_tool_interaction(
    surface: SurfaceInfo,
    fixed,
    rng,
    magnitude_range=(-0.030, 0.070),
    half_angle: float = np.pi / 5,
    allowed=None,
) -> BoundarySpec:
    """Uniform admissible surface node, U(lo, hi) magnitude, cone direction around the outward normal.

    A negative magnitude pushes inward along the sampled direction.
    """
    fixed = np.asarray(fixed, dtype=np.int64)
    keep = np.ones(int(surface.nodes.max()) + 1 if surface.nodes.size else 0, dtype=bool)
    keep[fixed[fixed < keep.size]] = False
    if allowed is not None:
        ok = np.asarray(allowed, dtype=bool)
        keep[: ok.size] &= ok[: keep.size]
    admissible = surface.nodes[keep[surface.nodes]] if surface.nodes.size else surface.nodes
    if admissible.size == 0:
        raise ValueError("no admissible surface nodes for tool interaction")
    s = int(admissible[rng.integers(admissible.size)])
    m = rng.uniform(*magnitude_range)
    d = _cap_direction(surface.normal_of(s), half_angle, rng)
    return BoundarySpec.tool(fixed, s, m * d)


@dataclass
class ResectionState:
    phi: np.ndarray
    removed: np.ndarray  # (T,) bool
    c_cut: np.ndarray  # (N,) uint8

    @property
    def active_tets(self) -> np.ndarray:
        return ~self.removed


def apply_resection(mesh: TetMesh, phi) -> ResectionState:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (mesh.n_nodes,) or not np.isfinite(phi).all():
        raise ValueError("phi must be a finite value per node")
    neg = phi < 0
    removed = neg[mesh.tets].all(axis=1)
    return ResectionState(phi, removed, neg.astype(np.uint8))


def active_node_mask(mesh: TetMesh, c_cut) -> np.ndarray:
    """Nodes touched by a surviving tet; a tet is removed iff all its nodes are flagged."""
    c = np.asarray(c_cut).astype(bool)
    if c.ndim == 2:
        return np.stack([active_node_mask(mesh, row) for row in c])
    alive = ~c[mesh.tets].all(axis=1)
    mask = np.zeros(mesh.n_nodes, dtype=bool)
    mask[mesh.tets[alive].ravel()] = True
    return mask


@dataclass
class CutConfig:
    """Progressive planar resections: state k removes ``normal . (p - origin) < depth_k``."""

    origin: tuple[float, float, float]
    normal: tuple[float, float, float]
    depth_start: float
    depth_stop: float

    def depths(self, n_states: int) -> np.ndarray:
        return np.linspace(self.depth_start, self.depth_stop, n_states)

    def phi(self, mesh: TetMesh, depth: float) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return (mesh.vertices - np.asarray(self.origin)) @ n - depth

    @classmethod
    def root_wedge(cls, mesh: TetMesh, start: float = 0.5, stop: float = 0.9) -> "CutConfig":
        """Wedge cut at the bottom of the clamped x=0 face of a bar, as fractions of its height."""
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        ext = hi - lo
        normal = np.array([ext[2], 0.0, ext[0]]) / np.hypot(ext[0], ext[2])
        # distance from the bottom-root edge to a point at height h on the x=0 face is h * normal[2]
        return cls(tuple(lo), tuple(normal), start * ext[2] * normal[2], stop * ext[2] * normal[2])


@dataclass
class SampleRecord:
    signal: np.ndarray  # (N, 3) float32
    c_bc: np.ndarray  # (N,) uint8
    c_cut: np.ndarray  # (N,) uint8
    U: np.ndarray  # (N, 3) float32
    node: int = -1
    cut_state: int = -1


@dataclass
class Dataset:
    signal: np.ndarray  # (S, N, 3) float32
    c_bc: np.ndarray  # (S, N) uint8
    c_cut: np.ndarray  # (S, N) uint8
    U: np.ndarray  # (S, N, 3) float32
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.signal.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.signal.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.signal[idx], self.c_bc[idx], self.c_cut[idx], self.U[idx], dict(self.meta))

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))

    @classmethod
    def from_records(cls, records: list[SampleRecord], n_nodes: int, meta=None) -> "Dataset":
        if not records:
            return cls(
                np.zeros((0, n_nodes, 3), np.float32), np.zeros((0, n_nodes), np.uint8),
                np.zeros((0, n_nodes), np.uint8), np.zeros((0, n_nodes, 3), np.float32), dict(meta or {}),
            )
        return cls(
            np.stack([r.signal for r in records]).astype(np.float32),
            np.stack([r.c_bc for r in records]).astype(np.uint8),
            np.stack([r.c_cut for r in records]).astype(np.uint8),
            np.stack([r.U for r in records]).astype(np.float32),
            dict(meta or {}),
        )


def write_dataset(ds: Dataset, path, sidecar: dict | None = None) -> None:
    path = Path(path)
    n = ds.n_nodes
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", DATASET_VERSION, n, len(ds)))
        for k in range(len(ds)):
            fh.write(np.ascontiguousarray(ds.signal[k], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.c_bc[k], dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(ds.c_cut[k], dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(ds.U[k], dtype="<f4").tobytes())
    meta = dict(ds.meta if sidecar is None else sidecar)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def read_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path} is not an SGF1 dataset")
    version, n, count = struct.unpack("<III", raw[4:16])
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    rec = np.dtype([("S", "<f4", (n, 3)), ("bc", "u1", (n,)), ("cut", "u1", (n,)), ("U", "<f4", (n, 3))])
    body = raw[16:]
    if len(body) != rec.itemsize * count:
        raise ValueError(f"{path}: expected {rec.itemsize * count} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=rec, count=count)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return Dataset(
        arr["S"].astype(np.float32), arr["bc"].copy(), arr["cut"].copy(), arr["U"].astype(np.float32), meta
    )


class _CutStateCache:
    """Stiffness, surface and activity for each cut state, computed on first use."""

    def __init__(self, mesh: TetMesh, mat: MaterialParams, cut: CutConfig | None, n_states: int):
        self.mesh, self.mat = mesh, mat
        self.depths = cut.depths(n_states) if cut is not None and n_states > 0 else np.zeros(0)
        self.cut = cut
        self._states: dict[int, tuple] = {}

    def get(self, k: int):
        if k not in self._states:
            mesh = self.mesh
            if k < 0:
                res = ResectionState(np.ones(mesh.n_nodes), np.zeros(mesh.n_tets, bool), np.zeros(mesh.n_nodes, np.uint8))
            else:
                res = apply_resection(mesh, self.cut.phi(mesh, self.depths[k]))
            if res.removed.all():
                raise SolverError(f"cut state {k} removes the whole domain")
            K = assemble_stiffness(mesh, self.mat, res.active_tets)
            surface = extract_surface(mesh, res.active_tets)
            active = active_node_mask(mesh, res.c_cut)
            n_comp, label = connected_components(_node_graph(K), directed=False)
            anchored = np.zeros(n_comp, bool)
            anchored[np.unique(label[mesh.fixed_nodes[active[mesh.fixed_nodes]]])] = True
            allowed = active & anchored[label]
            self._states[k] = (res, K, surface, active, allowed)
        return self._states[k]


def generate_dataset(
    mesh: TetMesh,
    material: MaterialParams = MaterialParams(),
    n_samples: int = 100,
    cut_fraction: float = 0.0,
    n_cut_states: int = 25,
    rng_seed: int = 0,
    cut: CutConfig | None = None,
    magnitude_range=(-0.030, 0.070),
    half_angle: float = np.pi / 5,
    threads: int = 1,
    out=None,
    extra_meta: dict | None = None,
) -> Dataset:
    """Draw ``n_samples`` tool interactions (optionally on progressively cut meshes) and solve each."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 0.0 <= cut_fraction <= 1.0:
        raise ValueError("cut_fraction must lie in [0, 1]")
    if cut_fraction > 0 and cut is None:
        cut = CutConfig.root_wedge(mesh)
    cache = _CutStateCache(mesh, material, cut, n_cut_states if cut_fraction > 0 else 0)
    fixed = mesh.fixed_nodes

    def draw(index: int) -> SampleRecord | None:
        rng = np.random.default_rng([rng_seed, index])
        state = -1
        if cut_fraction > 0 and rng.random() < cut_fraction:
            state = int(rng.integers(n_cut_states))
        res, K, surface, active, allowed = cache.get(state)
        bc = sample_tool_interaction(surface, fixed, rng, magnitude_range, half_angle, allowed=allowed)
        try:
            U = solve_dirichlet(K, bc, active)
        except SolverError as exc:
            log.warning("sample %d skipped: %s", index, exc)
            return None
        signal = np.zeros((mesh.n_nodes, 3), dtype=np.float32)
        signal[bc.node] = bc.displacement
        c_bc = np.zeros(mesh.n_nodes, dtype=np.uint8)
        c_bc[fixed] = 1
        c_bc[bc.node] = 1
        return SampleRecord(signal, c_bc, res.c_cut.copy(), U.astype(np.float32), bc.node, state)

    # warm the per-state cache serially so worker threads only read it
    for k in [-1] + (list(range(n_cut_states)) if cut_fraction > 0 else []):
        cache.get(k)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(draw, range(n_samples)))
    else:
        results = [draw(i) for i in range(n_samples)]
    records = [r for r in results if r is not None]
    skipped = n_samples - len(records)
    states = [r.cut_state for r in records]
    meta = {
        "n_nodes": mesh.n_nodes,
        "material": asdict(material),
        "seed": int(rng_seed),
        "n_requested": int(n_samples),
        "skipped": int(skipped),
        "cut_fraction": float(cut_fraction),
        "n_cut_states": int(n_cut_states),
        "cut": None if cut is None else asdict(cut),
        "magnitude_range": [float(v) for v in magnitude_range],
        "half_angle": float(half_angle),
        "state_counts": {str(k): int(states.count(k)) for k in sorted(set(states))},
        "nodes": [r.node for r in records],
        "cut_states": states,
    }
    meta.update(extra_meta or {})
    ds = Dataset.from_records(records, mesh.n_nodes, meta)
    if out is not None:
        write_dataset(ds, out)
    return ds
