"""Binary checkpoints, legacy VTK export, and build identification."""
from __future__ import annotations

import json
import struct
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diff import ParamStore
from .hierarchy import MeshHierarchy
from .mesh import TetMesh
from .model import ModelConfig, SurgFormer

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "CheckpointError",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "write_vtk",
    "read_vtk_points",
    "build_id",
]

CHECKPOINT_MAGIC = b"SGFC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    from . import __version__

    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        )
        tag = out.stdout.strip()
        if tag:
            return f"{__version__}+g{tag}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class Checkpoint:
    config: dict  # {"model": ..., plus provenance such as run_config, build}
    hierarchy: MeshHierarchy
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    def to_model(self) -> SurgFormer:
        cfg = self.model_config
        params = ParamStore(dtype=np.float32)
        for name, value in self.tensors.items():
            params.add(name, value)
        from .model import init_weights

        expected = init_weights(cfg, 0)
        if expected.names() != params.names():
            raise CheckpointError("checkpoint tensors do not match the stored model config")
        for name, t in expected:
            if params[name].shape != t.shape:
                raise CheckpointError(f"tensor {name} has shape {params[name].shape}, config implies {t.shape}")
        return SurgFormer(cfg, params, self.hierarchy, dict(self.config))

    @classmethod
    def from_model(cls, model: SurgFormer, extra: dict | None = None) -> "Checkpoint":
        config = {"model": model.config.to_dict()}
        config.update(extra or {})
        return cls(config, model.hierarchy, {n: t.value.astype("<f4") for n, t in model.params})


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def save_checkpoint(ckpt: Checkpoint | SurgFormer, path, extra: dict | None = None) -> None:
    if isinstance(ckpt, SurgFormer):
        ckpt = Checkpoint.from_model(ckpt, extra)
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    hier = ckpt.hierarchy.to_bytes()
    parts = [CHECKPOINT_MAGIC, _u32(CHECKPOINT_VERSION), _u32(len(cfg)), cfg, _u32(len(hier)), hier, _u32(len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim), *(_u32(d) for d in arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expect_model: ModelConfig | dict | None = None) -> Checkpoint:
    """Read an SGFC file; a differing ``expect_model`` config is rejected."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an SGFC checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    hierarchy = MeshHierarchy.from_bytes(r.take(r.u32()))
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.raw):
        raise CheckpointError("trailing bytes after checkpoint tensors")
    if expect_model is not None:
        want = expect_model.to_dict() if isinstance(expect_model, ModelConfig) else dict(expect_model)
        if ModelConfig.from_dict(want).to_dict() != ModelConfig.from_dict(config["model"]).to_dict():
            raise CheckpointError("checkpoint model config does not match the requested config")
    return Checkpoint(config, hierarchy, tensors)


def _fmt(v: float) -> str:
    # shortest repr that round-trips, so parsed points equal the written doubles
    return repr(float(v))


def write_vtk(path, mesh: TetMesh, U=None, c_cut=None, deform: bool = False, title: str = "surgformer field") -> None:
    """Legacy ASCII unstructured grid with a displacement vector and cut flag per point."""
    n = mesh.n_nodes
    U = np.zeros((n, 3)) if U is None else np.asarray(U, dtype=np.float64)
    c = np.zeros(n, dtype=np.int64) if c_cut is None else np.asarray(c_cut).astype(np.int64)
    if U.shape != (n, 3) or c.shape != (n,):
        raise ValueError(f"field sizes {U.shape}/{c.shape} do not match mesh with {n} nodes")
    P = mesh.vertices + U if deform else mesh.vertices
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {n} double")
    lines += [" ".join(_fmt(v) for v in row) for row in P]
    t = mesh.n_tets
    lines.append(f"CELLS {t} {5 * t}")
    lines += ["4 " + " ".join(str(int(i)) for i in tet) for tet in mesh.tets]
    lines.append(f"CELL_TYPES {t}")
    lines += ["10"] * t
    lines.append(f"POINT_DATA {n}")
    lines.append("VECTORS displacement double")
    lines += [" ".join(_fmt(v) for v in row) for row in U]
    lines.append("SCALARS cut_flag int 1")
    lines.append("LOOKUP_TABLE default")
    lines += [str(int(v)) for v in c]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_vtk_points(path) -> np.ndarray:
    """Parse the POINTS block back from a legacy ASCII file."""
    tokens = Path(path).read_text(encoding="ascii").split("\n")
    for i, line in enumerate(tokens):
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            return np.array([[float(x) for x in tokens[i + 1 + k].split()] for k in range(n)])
    raise ValueError("no POINTS section")
