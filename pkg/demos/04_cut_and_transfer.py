"""Cut conditioning: adapt an uncut model to a resected bar in stages.

Zero-shot reuses the uncut weights, with a random cut embedding and a fresh
first adapter layer, whose input width grows. The adapter stage trains only
the input adapter and the embedding. The full stage then trains everything.
"""
import dataclasses

from surgformer.elasticity import CutConfig, generate_dataset
from surgformer.hierarchy import build_hierarchy
from surgformer.mesh import generate_bar_mesh
from surgformer.model import ModelConfig, SurgFormer
from surgformer.train import TrainConfig, fit_normalisation, run_transfer_stages, train_loop

mesh = generate_bar_mesh(8, 2, 2, (0.14, 0.04, 0.04))
uncut = generate_dataset(mesh, n_samples=300, rng_seed=0)
cut = generate_dataset(mesh, n_samples=300, cut_fraction=0.5, n_cut_states=8, rng_seed=1, cut=CutConfig.root_wedge(mesh))
print(f"cut states: {cut.meta['state_counts']}")

cfg = ModelConfig(width=32, heads=4, ff_hidden=64, level_ratios=(0.25, 0.25), levels=2, global_levels=(1, 2), **fit_normalisation(mesh, uncut))
source = SurgFormer.create(cfg, build_hierarchy(mesh, cfg.level_ratios), seed=0)
train_loop(source, mesh, uncut, TrainConfig(epochs=40, lr=2e-3, loss_weighting="relative", relative_floor=0.3, symmetry_augment=True))

ctrain, ctest = cut.split(250)
stage_cfg = TrainConfig(epochs=20, lr=1e-3, loss_weighting="relative", relative_floor=0.3, symmetry_augment=True)
out = run_transfer_stages(source, mesh, ctrain, ctest, stage_cfg, stage_cfg)
print(f"reinitialised tensors: {out['reinitialised'] or 'none'}")
for stage, rep in out["reports"].items():
    print(f"  {stage:9s} DCM {rep.dcm:5.1f}  nRMSE {rep.nrmse:.3f}")
