import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from surgformer.cli import RunConfig, CommandError, main
from surgformer.elasticity import read_dataset
from surgformer.formats import load_checkpoint, read_vtk_points
from surgformer.mesh import load_mesh

CONFIG = {
    "model": {"levels": 1, "width": 8, "heads": 2, "ff_hidden": 8, "cut_dim": 4, "global_levels": [1], "level_ratios": [0.5]},
    "train": {"batch_size": 4, "max_steps": 3, "lr": 1e-3},
}


def run(*argv):
    return main([str(a) for a in argv])


def rerun_same_bytes(argv, outputs):
    assert run(*argv) == 0
    first = {p: Path(p).read_bytes() for p in outputs}
    assert run(*argv) == 0
    for p, raw in first.items():
        assert Path(p).read_bytes() == raw, f"{p} changed between identical runs"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(CONFIG))
    assert run("gen-mesh", "--nx", 4, "--ny", 2, "--nz", 2, "--extent", 0.14, 0.04, 0.04, "--out", d / "bar.json") == 0
    assert run("gen-data", "--mesh", d / "bar.json", "--n", 12, "--seed", 1, "--out", d / "uncut.sgf") == 0
    assert run("gen-data", "--mesh", d / "bar.json", "--n", 12, "--cut-fraction", 0.5, "--cut-states", 3, "--seed", 2, "--out", d / "cut.sgf") == 0
    assert run("train", "--config", d / "cfg.json", "--data", d / "uncut.sgf", "--out", d / "m.sgfc") == 0
    return d


def test_gen_mesh_counts_and_bytes(tmp_path, capsys):
    out = tmp_path / "m.json"
    rerun_same_bytes(["gen-mesh", "--kind", "bar", "--nx", 4, "--ny", 2, "--nz", 2, "--out", out], [out, str(out) + ".meta.json"])
    assert "vertices 45 tets 96" in capsys.readouterr().out
    m = load_mesh(out)
    assert (m.n_nodes, m.n_tets) == (45, 96)
    meta = json.loads(Path(str(out) + ".meta.json").read_text())
    assert meta["run_config"]["command"] == "gen-mesh" and meta["build"]


def test_bad_flags_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["gen-mesh", "--nx", "4", "--ny", "2", "--nz", "2"])
    assert exc.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "surgformer.cli", "gen-mesh", "--nx", "1"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_gen_mesh_failure_exit_1(tmp_path):
    assert run("gen-mesh", "--nx", 1, "--ny", 1, "--nz", 1, "--extent", 1, 0, 1, "--out", tmp_path / "x.json") == 1


def test_gen_data_uncut(work, tmp_path, capsys):
    out = tmp_path / "d.sgf"
    rerun_same_bytes(["gen-data", "--mesh", work / "bar.json", "--n", 10, "--cut-fraction", 0, "--out", out], [out, str(out) + ".json"])
    text = capsys.readouterr().out
    assert "uncut: 10" in text and "skipped 0" in text
    ds = read_dataset(out)
    assert len(ds) == 10 and ds.n_nodes == 45 and not ds.c_cut.any()


def test_gen_data_cut_counts(work, capsys):
    ds = read_dataset(work / "cut.sgf")
    assert len(ds) == 12 and ds.c_cut.any()
    assert sum(ds.meta["state_counts"].values()) == 12


def test_gen_data_failure_rate_exit_1(work, tmp_path, monkeypatch):
    import surgformer.cli as cli

    real = cli.generate_dataset

    def failing(*a, **k):
        ds = real(*a, **k)
        ds.meta["skipped"] = 5
        return ds

    monkeypatch.setattr(cli, "generate_dataset", failing)
    assert run("gen-data", "--mesh", work / "bar.json", "--n", 10, "--out", tmp_path / "d.sgf") == 1


def test_train_outputs_and_bytes(work):
    out = work / "again.sgfc"
    argv = ["train", "--config", work / "cfg.json", "--data", work / "uncut.sgf", "--out", out]
    rerun_same_bytes(argv, [out, str(out) + ".loss.csv", str(out) + ".loss.csv.json"])
    ck = load_checkpoint(out)
    assert ck.config["run_config"]["train"]["max_steps"] == 3 and ck.config["build"]
    lines = Path(str(out) + ".loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 4


def test_train_mesh_mismatch_exit_1(work, tmp_path):
    assert run("gen-mesh", "--nx", 2, "--ny", 2, "--nz", 2, "--out", tmp_path / "other.json") == 0
    assert run("train", "--data", work / "uncut.sgf", "--mesh", tmp_path / "other.json", "--out", tmp_path / "m.sgfc") == 1


def test_bad_config_exit_1(work, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimiser": {}}))
    assert run("train", "--config", bad, "--data", work / "uncut.sgf", "--out", tmp_path / "m.sgfc") == 1
    with pytest.raises(CommandError):
        RunConfig.resolve("train", train={"lr": -1.0})


def test_eval_own_predictions_dcm_100(work, capsys):
    pred = work / "pred.sgf"
    assert run("eval", "--checkpoint", work / "m.sgfc", "--data", work / "uncut.sgf", "--report", work / "r0.json", "--save-predictions", pred) == 0
    report = work / "r1.json"
    rerun_same_bytes(["eval", "--checkpoint", work / "m.sgfc", "--data", pred, "--mesh", work / "bar.json", "--report", report, "--timing-samples", 0], [report])
    r = json.loads(report.read_text())
    assert r["dcm"] == pytest.approx(100.0) and r["nrmse"] == pytest.approx(0.0, abs=1e-6)
    assert r["run_config"]["command"] == "eval"


def test_eval_version_mismatch_exit_1(work, tmp_path):
    raw = bytearray((work / "m.sgfc").read_bytes())
    raw[4:8] = (7).to_bytes(4, "little")
    (tmp_path / "v7.sgfc").write_bytes(bytes(raw))
    assert run("eval", "--checkpoint", tmp_path / "v7.sgfc", "--data", work / "uncut.sgf", "--report", tmp_path / "r.json") == 1


def test_transfer_stages(work):
    src = load_checkpoint(work / "m.sgfc").tensors
    outs = {}
    for stage in ("zeroshot", "adapter", "full"):
        out = work / f"t_{stage}.sgfc"
        argv = ["transfer", "--from-checkpoint", work / "m.sgfc", "--stage", stage, "--data", work / "cut.sgf", "--config", work / "cfg.json", "--out", out]
        rerun_same_bytes(argv, [out])
        outs[stage] = load_checkpoint(out).tensors
    zs, ad, full = outs["zeroshot"], outs["adapter"], outs["full"]
    for name, v in src.items():
        if name in zs and zs[name].shape == v.shape:
            assert np.array_equal(zs[name], v), name
    blocks = [n for n in ad if not n.startswith(("adapter.", "cut."))]
    assert blocks and all(np.array_equal(ad[n], zs[n]) for n in blocks)
    assert any(not np.array_equal(ad[n], zs[n]) for n in ad if n.startswith("adapter."))
    assert any(not np.array_equal(full[n], zs[n]) for n in blocks)


def test_adv_gen_and_finetune(work, capsys):
    adv = work / "adv.sgf"
    rerun_same_bytes(
        ["adv-gen", "--checkpoint", work / "m.sgfc", "--data", work / "uncut.sgf", "--m", 4, "--steps", 2, "--out", adv], [adv, str(adv) + ".json"]
    )
    assert "signals 4" in capsys.readouterr().out
    ds = read_dataset(adv)
    assert ds.meta["adversarial"] and ds.meta["run_config"]["adv"]["alpha"] == 0.2
    out, report = work / "ft.sgfc", work / "ft.json"
    argv = ["adv-finetune", "--checkpoint", work / "m.sgfc", "--data", work / "uncut.sgf", "--adv", adv, "--config", work / "cfg.json", "--out", out, "--report", report]
    rerun_same_bytes(argv, [out, report])
    cells = json.loads(report.read_text())
    assert {"mdr_clean_standard", "mdr_adv_standard", "mdr_clean_finetuned", "mdr_adv_finetuned"} <= set(cells)
    assert run("adv-finetune", "--checkpoint", work / "m.sgfc", "--data", work / "uncut.sgf", "--adv", work / "uncut.sgf", "--out", work / "x.sgfc") == 1


def test_export_vtk(work, tmp_path):
    out = tmp_path / "f.vtk"
    rerun_same_bytes(["export-vtk", "--mesh", work / "bar.json", "--field", work / "uncut.sgf", "--index", 3, "--deform", "--out", out], [out])
    ds = read_dataset(work / "uncut.sgf")
    m = load_mesh(work / "bar.json")
    assert np.array_equal(read_vtk_points(out), m.vertices + ds.U[3].astype(np.float64))
    np.save(tmp_path / "bad.npy", np.zeros((3, 3)))
    assert run("export-vtk", "--mesh", work / "bar.json", "--field", tmp_path / "bad.npy", "--out", tmp_path / "g.vtk") == 1
    assert run("export-vtk", "--mesh", work / "bar.json", "--field", work / "uncut.sgf", "--index", 99, "--out", tmp_path / "g.vtk") == 1


def test_threads_env(work, tmp_path, monkeypatch):
    a, b = tmp_path / "a.sgf", tmp_path / "b.sgf"
    assert run("--threads", 2, "gen-data", "--mesh", work / "bar.json", "--n", 6, "--out", a) == 0
    monkeypatch.setenv("SURGFORMER_THREADS", "abc")
    assert run("gen-data", "--mesh", work / "bar.json", "--n", 6, "--out", b) == 1
    monkeypatch.setenv("SURGFORMER_THREADS", "3")
    assert run("gen-data", "--mesh", work / "bar.json", "--n", 6, "--out", b) == 0
    assert read_dataset(a).U.tobytes() == read_dataset(b).U.tobytes()
