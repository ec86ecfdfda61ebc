"""``surgformer`` command line: mesh and data generation, training, transfer, evaluation, adversary, export."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elasticity import CutConfig, Dataset, MaterialParams, generate_dataset, read_dataset, write_dataset
from .formats import Checkpoint, CheckpointError, build_id, load_checkpoint, save_checkpoint, write_vtk
from .hierarchy import build_hierarchy
from .mesh import MeshError, TetMesh, generate_bar_mesh, load_mesh, save_mesh
from .model import ModelConfig, SurgFormer
from .robust import AdvConfig, AdvSet, adv_finetune, generate_adv_set, mean_roughness
from .train import TrainConfig, evaluate, fit_normalisation, predict_dataset, train_loop, transfer_model

log = logging.getLogger("surgformer")

__all__ = ["RunConfig", "main", "build_parser"]

MAX_SKIP_RATE = 0.10


class CommandError(RuntimeError):
    """Failure reported as exit code 1."""


@dataclass
class RunConfig:
    """Config file sections merged with command-line overrides, fully resolved."""

    command: str
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    adv: dict = field(default_factory=dict)
    hierarchy_seed: int = 0
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, command: str, config_path=None, model=None, train=None, adv=None, paths=None, options=None, hierarchy_seed=None):
        base: dict = {}
        if config_path:
            try:
                base = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise CommandError(f"cannot read config {config_path}: {exc}") from exc
            unknown = set(base) - {"model", "train", "adv", "hierarchy_seed"}
            if unknown:
                raise CommandError(f"unknown config sections {sorted(unknown)}")
        merged = cls(
            command,
            {**base.get("model", {}), **(model or {})},
            {**base.get("train", {}), **(train or {})},
            {**base.get("adv", {}), **(adv or {})},
            int(base.get("hierarchy_seed", 0) if hierarchy_seed is None else hierarchy_seed),
            dict(paths or {}),
            dict(options or {}),
        )
        try:
            if merged.model:  # overrides only; normalisation is fitted later unless given
                ModelConfig.from_dict(merged.model)
            merged.train = TrainConfig.from_dict(merged.train).to_dict()
            merged.adv = AdvConfig.from_dict(merged.adv).to_dict()
        except (TypeError, ValueError) as exc:
            raise CommandError(f"invalid configuration: {exc}") from exc
        return merged

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def provenance(self) -> dict:
        return {"run_config": self.to_dict(), "build": build_id()}


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get("SURGFORMER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise CommandError(f"SURGFORMER_THREADS must be an integer, got {env!r}") from exc
    return 1


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_mesh_for(data: Dataset, data_path, mesh_arg=None) -> TetMesh:
    if mesh_arg:
        return load_mesh(mesh_arg)
    recorded = data.meta.get("mesh")
    if not recorded:
        raise CommandError("dataset sidecar records no mesh; pass --mesh")
    for cand in (Path(recorded), Path(data_path).parent / Path(recorded).name):
        if cand.exists():
            return load_mesh(cand)
    raise CommandError(f"mesh {recorded} recorded by the dataset was not found; pass --mesh")


def _read_data(path) -> Dataset:
    try:
        return read_dataset(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read dataset {path}: {exc}") from exc


def _read_checkpoint(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise CommandError(f"cannot load checkpoint {path}: {exc}") from exc


def _check_sizes(model: SurgFormer, mesh: TetMesh, data: Dataset) -> None:
    n0 = model.hierarchy.sizes[0]
    if mesh.n_nodes != n0 or data.n_nodes != n0:
        raise CommandError(f"size mismatch: checkpoint hierarchy has {n0} nodes, mesh {mesh.n_nodes}, data {data.n_nodes}")


def _train_cfg(args, base: dict) -> dict:
    over = {}
    for key, attr in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"), ("seed", "seed"), ("max_steps", "max_steps")):
        v = getattr(args, attr, None)
        if v is not None:
            over[key] = v
    return {**base, **over}


# ---------------------------------------------------------------- commands


def cmd_gen_mesh(args) -> int:
    if args.kind != "bar":
        raise CommandError(f"unsupported mesh kind {args.kind!r}")
    try:
        mesh = generate_bar_mesh(args.nx, args.ny, args.nz, tuple(args.extent))
    except (MeshError, ValueError) as exc:
        raise CommandError(str(exc)) from exc
    save_mesh(mesh, args.out)
    run = RunConfig.resolve("gen-mesh", options={"kind": args.kind, "nx": args.nx, "ny": args.ny, "nz": args.nz, "extent": list(args.extent)}, paths={"out": str(args.out)})
    _write_json(str(args.out) + ".meta.json", run.provenance())
    print(f"vertices {mesh.n_nodes} tets {mesh.n_tets}")
    return 0


def cmd_gen_data(args) -> int:
    mesh = load_mesh(args.mesh)
    cut = None
    if args.cut_fraction > 0:
        cut = CutConfig.root_wedge(mesh)
        if args.cut_origin is not None:
            cut = CutConfig(tuple(args.cut_origin), tuple(args.cut_normal or cut.normal), *(args.cut_depths or (cut.depth_start, cut.depth_stop)))
    run = RunConfig.resolve(
        "gen-data",
        paths={"mesh": str(args.mesh), "out": str(args.out)},
        options={"n": args.n, "cut_fraction": args.cut_fraction, "cut_states": args.cut_states, "seed": args.seed, "E": args.E, "nu": args.nu},
    )
    ds = generate_dataset(
        mesh, MaterialParams(args.E, args.nu), args.n, args.cut_fraction, args.cut_states, args.seed,
        cut=cut, threads=_threads(args), extra_meta={"mesh": str(args.mesh), **run.provenance()},
    )
    write_dataset(ds, args.out)
    counts = ds.meta["state_counts"]
    for state, count in counts.items():
        label = "uncut" if state == "-1" else f"cut state {state}"
        print(f"{label}: {count}")
    skipped = ds.meta["skipped"]
    print(f"records {len(ds)} skipped {skipped}")
    if skipped > MAX_SKIP_RATE * args.n:
        print(f"error: solver failure rate {skipped / args.n:.1%} exceeds {MAX_SKIP_RATE:.0%}", file=sys.stderr)
        return 1
    return 0


def _fresh_model(run: RunConfig, mesh: TetMesh, data: Dataset, seed: int) -> SurgFormer:
    base = {**fit_normalisation(mesh, data), "cut_enabled": bool(run.train.get("cut_enabled", False))}
    cfg = ModelConfig.from_dict({**base, **run.model})
    h = build_hierarchy(mesh, cfg.level_ratios, run.hierarchy_seed)
    return SurgFormer.create(cfg, h, seed=seed)


def _save_training(model: SurgFormer, result, out, run: RunConfig, loss_csv=None) -> None:
    save_checkpoint(model, out, run.provenance())
    csv_path = loss_csv or str(out) + ".loss.csv"
    result.write_csv(csv_path)
    _write_json(str(csv_path) + ".json", run.provenance())
    print(f"steps {result.steps} final loss {result.losses[-1] if result.losses else float('nan'):.6g}")


def cmd_train(args) -> int:
    data = _read_data(args.data)
    mesh = _load_mesh_for(data, args.data, args.mesh)
    if mesh.n_nodes != data.n_nodes:
        raise CommandError(f"dataset has {data.n_nodes} nodes but mesh has {mesh.n_nodes}")
    run = RunConfig.resolve("train", args.config, train=_train_cfg(args, {}), paths={"data": str(args.data), "out": str(args.out)})
    tcfg = TrainConfig.from_dict(run.train)
    model = _fresh_model(run, mesh, data, tcfg.seed)
    result = train_loop(model, mesh, data, tcfg)
    _save_training(model, result, args.out, run, args.loss_csv)
    return 0


def cmd_transfer(args) -> int:
    ckpt = _read_checkpoint(args.from_checkpoint)
    source = ckpt.to_model()
    data = _read_data(args.data)
    mesh = _load_mesh_for(data, args.data, args.mesh)
    _check_sizes(source, mesh, data)
    run = RunConfig.resolve(
        "transfer", args.config, train=_train_cfg(args, {}),
        paths={"from_checkpoint": str(args.from_checkpoint), "data": str(args.data), "out": str(args.out)},
        options={"stage": args.stage},
    )
    target_cfg = dataclasses.replace(source.config, cut_enabled=True)
    model, reinit = transfer_model(source, target_cfg, seed=int(run.train["seed"]))
    if reinit:
        print("reinitialised: " + ", ".join(reinit))
    tcfg = TrainConfig.from_dict(run.train)
    if args.stage == "zeroshot":
        from .train import TrainResult

        result = TrainResult([], 0, [], 0.0)
    else:
        policy = "adapter_and_embedding_only" if args.stage == "adapter" else "none"
        result = train_loop(model, mesh, data, dataclasses.replace(tcfg, freeze=policy))
    _save_training(model, result, args.out, run, args.loss_csv)
    if args.report:
        eval_data = _read_data(args.eval_data) if args.eval_data else data
        report = evaluate(model, mesh, eval_data)
        _write_json(args.report, {**report.to_dict(), **run.provenance()})
        print(f"dcm {report.dcm:.3f}")
    return 0


def cmd_eval(args) -> int:
    model = _read_checkpoint(args.checkpoint).to_model()
    data = _read_data(args.data)
    mesh = _load_mesh_for(data, args.data, args.mesh)
    _check_sizes(model, mesh, data)
    run = RunConfig.resolve("eval", paths={"checkpoint": str(args.checkpoint), "data": str(args.data), "report": str(args.report)})
    report = evaluate(model, mesh, data, timing_samples=args.timing_samples)
    payload = {**report.to_dict(), **run.provenance()}
    _write_json(args.report, payload)
    if args.save_predictions:
        pred = predict_dataset(model, mesh, data)
        meta = {**data.meta, "predictions_of": str(args.checkpoint), **run.provenance()}
        write_dataset(Dataset(data.signal, data.c_bc, data.c_cut, pred, meta), args.save_predictions)
    print(f"nrmse {report.nrmse:.6f} nmaxerr {report.nmaxerr:.6f} dcm {report.dcm:.3f} params {report.params}")
    return 0


def cmd_adv_gen(args) -> int:
    model = _read_checkpoint(args.checkpoint).to_model()
    data = _read_data(args.data)
    mesh = _load_mesh_for(data, args.data, args.mesh)
    _check_sizes(model, mesh, data)
    adv_over = {"alpha": args.alpha, "m": args.m}
    for key in ("steps", "radius", "kappa", "seed"):
        if getattr(args, key) is not None:
            adv_over[key] = getattr(args, key)
    run = RunConfig.resolve("adv-gen", args.config, adv=adv_over, paths={"checkpoint": str(args.checkpoint), "data": str(args.data), "out": str(args.out)})
    adv = generate_adv_set(model, mesh, data, AdvConfig.from_dict(run.adv), threads=_threads(args))
    adv.meta.update({"mesh": data.meta.get("mesh"), **run.provenance()})
    ds = adv.to_dataset()
    write_dataset(ds, args.out)
    clean = mean_roughness(model, mesh, data.subset(adv.base_index))
    attacked = mean_roughness(model, mesh, ds)
    print(f"signals {len(adv)} mean_mdr_clean {clean:.6g} mean_mdr_adv {attacked:.6g}")
    return 0


def cmd_adv_finetune(args) -> int:
    ckpt = _read_checkpoint(args.checkpoint)
    standard = ckpt.to_model()
    model = ckpt.to_model()
    data = _read_data(args.data)
    mesh = _load_mesh_for(data, args.data, args.mesh)
    _check_sizes(model, mesh, data)
    adv = AdvSet.from_dataset(_read_data(args.adv))
    run = RunConfig.resolve(
        "adv-finetune", args.config, train=_train_cfg(args, {}), adv={"lam": args.lam},
        paths={"checkpoint": str(args.checkpoint), "data": str(args.data), "adv": str(args.adv), "out": str(args.out)},
    )
    result = adv_finetune(model, mesh, data, adv, TrainConfig.from_dict(run.train), AdvConfig.from_dict(run.adv))
    _save_training(model, result, args.out, run, args.loss_csv)
    if args.report:
        clean = _read_data(args.eval_data) if args.eval_data else data
        adv_eval = _read_data(args.adv_eval) if args.adv_eval else adv.to_dataset()
        cells = {}
        for label, m in (("standard", standard), ("finetuned", model)):
            cells[f"mdr_clean_{label}"] = mean_roughness(m, mesh, clean)
            cells[f"mdr_adv_{label}"] = mean_roughness(m, mesh, adv_eval)
            cells[f"dcm_clean_{label}"] = evaluate(m, mesh, clean, timing_samples=0).dcm
        _write_json(args.report, {**cells, **run.provenance()})
        for k, v in cells.items():
            print(f"{k} {v:.6g}")
    return 0


def cmd_export_vtk(args) -> int:
    mesh = load_mesh(args.mesh)
    field_path = Path(args.field)
    if field_path.suffix == ".npy":
        U = np.load(field_path)
        cut = None
    else:
        ds = _read_data(field_path)
        if not 0 <= args.index < len(ds):
            raise CommandError(f"sample index {args.index} out of range for {len(ds)} records")
        U, cut = ds.U[args.index], ds.c_cut[args.index]
    if np.shape(U) != (mesh.n_nodes, 3):
        raise CommandError(f"field has shape {np.shape(U)}, mesh has {mesh.n_nodes} nodes")
    write_vtk(args.out, mesh, U, cut, deform=args.deform, title=f"surgformer {build_id()}")
    print(f"points {mesh.n_nodes} cells {mesh.n_tets}")
    return 0


# ---------------------------------------------------------------- parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surgformer", description=__doc__)
    p.add_argument("--threads", type=_positive_int, help="worker cap (also SURGFORMER_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-mesh", help="write a structured tet mesh")
    g.add_argument("--kind", default="bar", choices=["bar"])
    g.add_argument("--nx", type=_positive_int, required=True)
    g.add_argument("--ny", type=_positive_int, required=True)
    g.add_argument("--nz", type=_positive_int, required=True)
    g.add_argument("--extent", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("LX", "LY", "LZ"))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_mesh)

    g = sub.add_parser("gen-data", help="solve FEM samples into an SGF1 dataset")
    g.add_argument("--mesh", required=True)
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--cut-fraction", type=_fraction, default=0.0)
    g.add_argument("--cut-states", type=_positive_int, default=25)
    g.add_argument("--cut-origin", type=float, nargs=3)
    g.add_argument("--cut-normal", type=float, nargs=3)
    g.add_argument("--cut-depths", type=float, nargs=2, metavar=("START", "STOP"))
    g.add_argument("--E", type=float, default=2100.0)
    g.add_argument("--nu", type=float, default=0.45)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def training_flags(g):
        g.add_argument("--config")
        g.add_argument("--mesh")
        g.add_argument("--epochs", type=int)
        g.add_argument("--lr", type=float)
        g.add_argument("--batch-size", type=_positive_int)
        g.add_argument("--max-steps", type=int)
        g.add_argument("--seed", type=int)
        g.add_argument("--loss-csv")

    g = sub.add_parser("train", help="train from scratch")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    training_flags(g)
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("transfer", help="adapt a checkpoint to cut-conditioned data")
    g.add_argument("--from-checkpoint", required=True)
    g.add_argument("--stage", required=True, choices=["zeroshot", "adapter", "full"])
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--report")
    g.add_argument("--eval-data")
    training_flags(g)
    g.set_defaults(func=cmd_transfer)

    g = sub.add_parser("eval", help="metrics and timing of a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--report", required=True)
    g.add_argument("--mesh")
    g.add_argument("--timing-samples", type=int, default=16)
    g.add_argument("--save-predictions")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("adv-gen", help="pre-generate adversarial tool signals")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True, help="clean samples providing anchors and flags")
    g.add_argument("--alpha", type=float, default=0.2)
    g.add_argument("--m", type=_positive_int, default=256)
    g.add_argument("--steps", type=int)
    g.add_argument("--radius", type=int)
    g.add_argument("--kappa", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.add_argument("--mesh")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_adv_gen)

    g = sub.add_parser("adv-finetune", help="fine-tune with the roughness penalty")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--adv", required=True)
    g.add_argument("--lambda", dest="lam", type=float, default=0.1)
    g.add_argument("--out", required=True)
    g.add_argument("--report")
    g.add_argument("--eval-data")
    g.add_argument("--adv-eval")
    training_flags(g)
    g.set_defaults(func=cmd_adv_finetune)

    g = sub.add_parser("export-vtk", help="legacy ASCII VTK of a displacement field")
    g.add_argument("--mesh", required=True)
    g.add_argument("--field", required=True, help="SGF1 dataset (with --index) or .npy N x 3 array")
    g.add_argument("--index", type=int, default=0)
    g.add_argument("--deform", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_export_vtk)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (CommandError, MeshError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
