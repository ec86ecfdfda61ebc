"""Train a small SurgFormer on a coarse bar and compare it against the FEM.

A few minutes on one core. The desk-scale run lives in the acceptance suite.
"""
from surgformer.elasticity import generate_dataset
from surgformer.hierarchy import build_hierarchy
from surgformer.mesh import generate_bar_mesh
from surgformer.model import ModelConfig, SurgFormer
from surgformer.train import TrainConfig, evaluate, fit_normalisation, train_loop

mesh = generate_bar_mesh(8, 2, 2, (0.14, 0.04, 0.04))
data = generate_dataset(mesh, n_samples=400, rng_seed=0)
train, test = data.split(340)
print(f"bar {mesh.n_nodes} nodes, {len(train)} training and {len(test)} test samples")

cfg = ModelConfig(width=32, heads=4, ff_hidden=64, level_ratios=(0.25, 0.25), levels=2, global_levels=(1, 2), **fit_normalisation(mesh, train))
model = SurgFormer.create(cfg, build_hierarchy(mesh, cfg.level_ratios), seed=0)
print(f"model parameters: {model.params.count()}")

before = evaluate(model, mesh, test, timing_samples=0)
res = train_loop(model, mesh, train, TrainConfig(epochs=40, lr=2e-3, loss_weighting="relative", relative_floor=0.3, symmetry_augment=True))
after = evaluate(model, mesh, test, timing_samples=8)
print(f"{res.steps} steps in {res.seconds:.0f} s, loss {res.losses[0]:.3f} -> {res.losses[-1]:.4f}")
print(f"held-out DCM {before.dcm:.1f} -> {after.dcm:.1f}, nRMSE {before.nrmse:.3f} -> {after.nrmse:.3f}")
print(f"inference {after.time_ms_median:.1f} ms per sample")
