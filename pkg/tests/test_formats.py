import struct
from pathlib import Path

import numpy as np
import pytest

from surgformer.formats import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    CheckpointError,
    build_id,
    load_checkpoint,
    read_vtk_points,
    save_checkpoint,
    write_vtk,
)
from surgformer.hierarchy import build_hierarchy
from surgformer.mesh import generate_bar_mesh
from surgformer.model import ModelConfig, SurgFormer

GOLDEN = Path(__file__).parent / "golden"


def tiny_model(seed=0, width=8):
    mesh = generate_bar_mesh(2, 2, 1)
    cfg = ModelConfig(levels=1, width=width, heads=2, ff_hidden=8, cut_dim=4, global_levels=(1,), level_ratios=(0.5,))
    return mesh, SurgFormer.create(cfg, build_hierarchy(mesh, cfg.level_ratios), seed=seed)


# ------------------------------------------------------------ checkpoint


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    mesh, model = tiny_model()
    p = tmp_path / "a.sgfc"
    save_checkpoint(model, p, {"note": "x"})
    ck = load_checkpoint(p)
    assert ck.config["note"] == "x" and ck.model_config == model.config
    back = ck.to_model()
    assert back.params.names() == model.params.names()
    for (_, a), (_, b) in zip(model.params, back.params):
        assert a.value.tobytes() == b.value.tobytes()
    for la, lb in zip(model.hierarchy.levels, back.hierarchy.levels):
        assert np.array_equal(la.nodes, lb.nodes) and np.array_equal(la.edges.senders, lb.edges.senders)
    q = tmp_path / "b.sgfc"
    save_checkpoint(ck, q)
    assert p.read_bytes() == q.read_bytes()


def test_checkpoint_layout(tmp_path):
    _, model = tiny_model()
    p = tmp_path / "a.sgfc"
    save_checkpoint(model, p)
    raw = p.read_bytes()
    assert raw[:4] == CHECKPOINT_MAGIC and struct.unpack("<I", raw[4:8])[0] == 1
    n = struct.unpack("<I", raw[8:12])[0]
    assert raw[12 : 12 + n].decode().startswith("{")


def test_checkpoint_rejects_corruption(tmp_path):
    _, model = tiny_model()
    p = tmp_path / "a.sgfc"
    save_checkpoint(model, p)
    raw = p.read_bytes()
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 9) + raw[8:],
        "truncated": raw[:-3],
        "trailing": raw + b"\0",
    }
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.sgfc"
        bad.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


def test_checkpoint_config_mismatch(tmp_path):
    _, model = tiny_model()
    p = tmp_path / "a.sgfc"
    save_checkpoint(model, p)
    load_checkpoint(p, expect_model=model.config)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(p, expect_model=ModelConfig(levels=1, width=16, heads=2, global_levels=(1,), level_ratios=(0.5,)))


def test_checkpoint_tensors_must_fit_config(tmp_path):
    _, model = tiny_model()
    ck = Checkpoint.from_model(model)
    _, wide = tiny_model(width=16)
    ck.tensors = {n: t.value for n, t in wide.params}
    with pytest.raises(CheckpointError, match="shape"):
        ck.to_model()
    ck.tensors = dict(list(ck.tensors.items())[:-1])
    with pytest.raises(CheckpointError):
        ck.to_model()


def test_build_id_is_stable():
    assert build_id() == build_id() and build_id().startswith("0.1.0")


# ------------------------------------------------------------ VTK


def unit_tet_mesh():
    from surgformer.mesh import make_mesh

    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return make_mesh(v, [[0, 1, 2, 3]], [])


def test_vtk_golden_single_tet(tmp_path):
    out = tmp_path / "tet.vtk"
    write_vtk(out, unit_tet_mesh())
    assert out.read_bytes() == (GOLDEN / "single_tet_zero.vtk").read_bytes()


def test_vtk_golden_with_field(tmp_path):
    m = unit_tet_mesh()
    U = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, -0.25, 0.0], [0.0, 0.0, 1e-3]])
    out = tmp_path / "tet.vtk"
    write_vtk(out, m, U, [0, 1, 0, 1], deform=True)
    assert out.read_bytes() == (GOLDEN / "single_tet_deformed.vtk").read_bytes()


def test_vtk_deform_and_point_count(tmp_path):
    m = generate_bar_mesh(3, 2, 2)
    U = np.random.default_rng(0).normal(size=(m.n_nodes, 3)) * 1e-2
    plain, bent = tmp_path / "p.vtk", tmp_path / "d.vtk"
    write_vtk(plain, m, U)
    write_vtk(bent, m, U, deform=True)
    P0, P1 = read_vtk_points(plain), read_vtk_points(bent)
    assert P0.shape == (m.n_nodes, 3)
    assert np.array_equal(P1, m.vertices + U)
    assert np.array_equal(P0, m.vertices)
    text = bent.read_text()
    assert f"CELLS {m.n_tets} {5 * m.n_tets}" in text and text.count("\n10\n") >= 1


def test_vtk_size_mismatch(tmp_path):
    with pytest.raises(ValueError, match="do not match"):
        write_vtk(tmp_path / "x.vtk", unit_tet_mesh(), np.zeros((5, 3)))
