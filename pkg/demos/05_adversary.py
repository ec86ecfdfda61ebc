"""Smoothness stress test: search for surface pushes that make the model rough.

Each adversarial input is a unit bump on the surface around a tool node,
scaled by a direction q with |q| <= alpha. Projected gradient ascent on q
maximises the Dirichlet roughness of the prediction. Fine-tuning with a
roughness penalty on those inputs then smooths the model.
"""
import dataclasses

from surgformer.elasticity import generate_dataset
from surgformer.hierarchy import build_hierarchy
from surgformer.mesh import generate_bar_mesh
from surgformer.model import ModelConfig, SurgFormer
from surgformer.robust import AdvConfig, adv_finetune, generate_adv_set, mean_roughness, mesh_laplacian
from surgformer.train import TrainConfig, evaluate, fit_normalisation, train_loop

mesh = generate_bar_mesh(8, 2, 2, (0.14, 0.04, 0.04))
data = generate_dataset(mesh, n_samples=300, rng_seed=0)
train, test = data.split(250)
cfg = ModelConfig(width=32, heads=4, ff_hidden=64, level_ratios=(0.25, 0.25), levels=2, global_levels=(1, 2), **fit_normalisation(mesh, train))
model = SurgFormer.create(cfg, build_hierarchy(mesh, cfg.level_ratios), seed=0)
train_loop(model, mesh, train, TrainConfig(epochs=40, lr=2e-3, loss_weighting="relative", relative_floor=0.3, symmetry_augment=True))

adv = AdvConfig(alpha=0.2, steps=10, radius=2, kappa=4.0, lam=0.1, m=64)
adv_train = generate_adv_set(model, mesh, train, adv)
adv_test = generate_adv_set(model, mesh, test, dataclasses.replace(adv, m=len(test), seed=1)).to_dataset()
L = mesh_laplacian(mesh)
print(f"{len(adv_train)} training and {len(adv_test)} held-out adversarial inputs")

tuned = SurgFormer(model.config, model.params.copy(), model.hierarchy, dict(model.meta))
adv_finetune(tuned, mesh, train, adv_train, TrainConfig(epochs=10, lr=1e-3, loss_weighting="relative", relative_floor=0.3, symmetry_augment=True), adv)
print(f"{'':10s} {'clean M_Dr':>11s} {'adv M_Dr':>10s} {'clean DCM':>10s}")
for name, m in (("standard", model), ("finetuned", tuned)):
    print(f"{name:10s} {mean_roughness(m, mesh, test, L=L):11.3f} {mean_roughness(m, mesh, adv_test, L=L):10.3f} {evaluate(m, mesh, test, timing_samples=0).dcm:10.1f}")
