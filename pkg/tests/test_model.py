import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import attention_naive, ff_naive, fusion_naive, layer_norm_naive, local_branch_naive, relabel_hierarchy
from surgformer import diff as D
from surgformer.diff import Tape, Tensor, grad_check
from surgformer.hierarchy import Level, MeshHierarchy, build_hierarchy, pool_max, unpool_broadcast
from surgformer.mesh import EdgeList, generate_bar_mesh
from surgformer.model import (
    ModelConfig,
    NodeFeatures,
    SurgFormer,
    adapter_forward,
    block_forward,
    cut_embed,
    ff_branch,
    gate_weights,
    gated_fusion,
    global_branch,
    graph_ops,
    init_weights,
    local_branch,
    model_forward,
    parameter_count,
    raw_features,
)

# Frozen: closed form evaluated by hand for the default configuration.
DEFAULT_PARAM_COUNT = 271235


def tiny_cfg(**kw):
    base = dict(levels=1, width=8, heads=2, ff_hidden=8, cut_dim=4, global_levels=(0, 1), level_ratios=(0.5,))
    base.update(kw)
    return ModelConfig(**base)


def flat_hierarchy(edges: EdgeList) -> MeshHierarchy:
    return MeshHierarchy([Level(np.arange(edges.n), edges)], [], [])


def random_graph(rng, n=5):
    pairs = {(i, i) for i in range(n)}
    for _ in range(2 * n):
        a, b = rng.integers(0, n, size=2)
        pairs |= {(int(a), int(b)), (int(b), int(a))}
    s, r = zip(*sorted(pairs))
    return EdgeList.from_pairs(s, r, n)


def incoming(edges):
    return [edges.senders[edges.indptr[i] : edges.indptr[i + 1]].tolist() for i in range(edges.n)]


def features(mesh, rng, batch=None, cut=False):
    n = mesh.n_nodes
    shape = (n,) if batch is None else (batch, n)
    sig = rng.normal(size=shape + (3,)) * 0.01
    bc = (rng.uniform(size=shape) < 0.3).astype(float)
    c = (rng.uniform(size=shape) < 0.5).astype(np.int64) if cut else None
    return NodeFeatures(mesh.vertices, sig, bc, c)


# ------------------------------------------------------------ config and weights


def test_config_rejects_bad_heads_and_levels():
    with pytest.raises(ValueError):
        ModelConfig(width=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(global_levels=(5,))
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"width": 64, "bogus": 1})
    with pytest.raises(ValueError, match="no active branch"):
        ModelConfig(branches=("global",), global_levels=(2, 3))


def test_init_deterministic_and_biases_zero():
    cfg = ModelConfig()
    a, b = init_weights(cfg, 3), init_weights(cfg, 3)
    assert all(x.value.tobytes() == y.value.tobytes() for (_, x), (_, y) in zip(a, b))
    for name, t in a:
        if name.split(".")[-1] in ("b1", "b2", "a1", "a2", "a", "b", "bias"):
            assert not t.value.any(), name
        if name.endswith("ln.gain"):
            assert (t.value == 1).all()


def test_init_ranges():
    cfg = ModelConfig(cut_enabled=True)
    p = init_weights(cfg, 0)
    w = p["enc0.0.local.W"].value
    assert np.abs(w).max() <= 1 / np.sqrt(cfg.width)
    assert np.abs(p["cut.emb"].value).max() < 0.2


def test_parameter_count_default():
    cfg = ModelConfig()
    assert parameter_count(cfg) == DEFAULT_PARAM_COUNT
    assert sum(t.value.size for _, t in init_weights(cfg)) == DEFAULT_PARAM_COUNT


@pytest.mark.parametrize("branches", [("local", "ff"), ("local", "global"), ("global", "ff"), ("local",)])
def test_branch_ablation_removes_exact_params(branches):
    full, ab = ModelConfig(), ModelConfig(branches=branches)
    pf, pa = init_weights(full), init_weights(ab)
    removed = {b for b in ("local", "global", "ff") if b not in branches}
    for name in set(pf.names()) - set(pa.names()):
        assert name.split(".")[2] in removed, name
    for name in pa.names():
        if name.endswith("gate.W"):
            level = int(name[3])
            assert pa[name].shape[1] == len(ab.active_branches(level)) * ab.width
    assert sum(t.value.size for _, t in pa) == parameter_count(ab)


def test_gate_width_without_global():
    cfg = ModelConfig(global_levels=())
    p = init_weights(cfg)
    assert all(p[n].shape == (64, 128) for n in p.names() if n.endswith("gate.W"))
    assert not any(".global." in n for n in p.names())


# ------------------------------------------------------------ adapter


def test_adapter_zero_and_shape():
    rng = np.random.default_rng(0)
    cfg = tiny_cfg()
    p = init_weights(cfg, dtype=np.float64)
    assert not adapter_forward(Tensor(np.zeros((5, 7))), p).value.any()
    for n in (3, 11):
        assert adapter_forward(Tensor(rng.normal(size=(n, 7))), p).shape == (n, 8)
    with pytest.raises(D.DiffError):
        adapter_forward(Tensor(np.zeros((5, 6))), p)


def test_adapter_gradcheck():
    p = init_weights(tiny_cfg(), 1, dtype=np.float64)
    f = Tensor(np.random.default_rng(1).normal(size=(6, 7)))
    res = grad_check(lambda: D.sum(adapter_forward(f, p)), [p[n] for n in p.names() if n.startswith("adapter")])
    assert res.max_rel_error < 1e-4


# ------------------------------------------------------------ local branch


def test_local_self_loop_only():
    cfg = tiny_cfg()
    e = EdgeList.from_pairs(range(4), range(4), 4)
    p = init_weights(cfg, dtype=np.float64)
    xbar = Tensor(np.random.default_rng(2).normal(size=(4, 8)))
    out = local_branch(xbar, graph_ops(flat_hierarchy(e)), 0, p, "enc0.0", cfg)
    assert np.allclose(out.value, xbar.value @ p["enc0.0.local.W"].value, atol=1e-14)


def test_local_equal_scores_mean():
    cfg = tiny_cfg()
    e = EdgeList.from_pairs([0, 1, 2, 0, 1], [0, 0, 0, 1, 2], 3)  # node 0 hears 0,1,2
    p = init_weights(cfg, dtype=np.float64)
    p["enc0.0.local.a_src"].value[:] = 0.0
    p["enc0.0.local.a_dst"].value[:] = 0.0
    xbar = np.random.default_rng(3).normal(size=(3, 8))
    out = local_branch(Tensor(xbar), graph_ops(flat_hierarchy(e)), 0, p, "enc0.0", cfg).value
    psi = xbar @ p["enc0.0.local.W"].value
    assert np.allclose(out[0], psi.mean(axis=0), atol=1e-14)


@given(st.integers(0, 10_000))
def test_local_matches_naive(seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_cfg()
    e = random_graph(rng)
    p = init_weights(cfg, seed, dtype=np.float64)
    xbar = rng.normal(size=(5, 8))
    got = local_branch(Tensor(xbar), graph_ops(flat_hierarchy(e)), 0, p, "enc0.0", cfg).value
    ref = local_branch_naive(
        xbar, incoming(e), p["enc0.0.local.W"].value, p["enc0.0.local.a_src"].value, p["enc0.0.local.a_dst"].value
    )
    assert np.allclose(got, ref, rtol=1e-10, atol=1e-12)
    # batched path goes through the fused kernel
    got_b = local_branch(Tensor(np.stack([xbar, xbar])), graph_ops(flat_hierarchy(e)), 0, p, "enc0.0", cfg).value
    assert np.allclose(got_b[1], ref, rtol=1e-10, atol=1e-12)


# ------------------------------------------------------------ global branch


def test_global_single_node():
    cfg = tiny_cfg()
    p = init_weights(cfg, dtype=np.float64)
    x = np.random.default_rng(4).normal(size=(1, 8))
    out = global_branch(Tensor(x), p, "enc0.0", cfg).value
    assert np.allclose(out, x @ p["enc0.0.global.W_V"].value @ p["enc0.0.global.W_O"].value, atol=1e-14)


def test_global_identical_rows():
    cfg = tiny_cfg()
    p = init_weights(cfg, dtype=np.float64)
    x = np.tile(np.random.default_rng(5).normal(size=(1, 8)), (4, 1))
    out = global_branch(Tensor(x), p, "enc0.0", cfg).value
    assert np.allclose(out, out[0], atol=1e-14)


def test_global_matches_naive():
    cfg = tiny_cfg()
    p = init_weights(cfg, 7, dtype=np.float64)
    x = np.random.default_rng(6).normal(size=(4, 8))
    names = [f"enc0.0.global.{n}" for n in ("W_Q", "W_K", "W_V", "W_O")]
    ref = attention_naive(x, *(p[n].value for n in names), cfg.heads)
    assert np.allclose(global_branch(Tensor(x), p, "enc0.0", cfg).value, ref, rtol=1e-10, atol=1e-12)


def test_global_rejects_inactive_level():
    cfg = tiny_cfg(global_levels=(1,))
    with pytest.raises(ValueError):
        global_branch(Tensor(np.zeros((2, 8))), init_weights(cfg), "enc0.0", cfg, level=0)


# ------------------------------------------------------------ feed-forward


def test_ff_zero_and_row_permutation():
    cfg = tiny_cfg()
    p = init_weights(cfg, dtype=np.float64)
    x = np.random.default_rng(7).normal(size=(6, 8))
    perm = np.random.default_rng(8).permutation(6)
    out = ff_branch(Tensor(x), p, "enc0.0").value
    assert np.allclose(ff_branch(Tensor(x[perm]), p, "enc0.0").value, out[perm], atol=1e-14)
    ref = ff_naive(x, *(p[f"enc0.0.ff.{n}"].value for n in ("W1", "a1", "W2", "a2")))
    assert np.allclose(out, ref, atol=1e-12)
    for n in ("W1", "a1", "W2", "a2"):
        p[f"enc0.0.ff.{n}"].value[:] = 0
    assert not ff_branch(Tensor(x), p, "enc0.0").value.any()


def test_ff_gradcheck():
    p = init_weights(tiny_cfg(), 2, dtype=np.float64)
    for n in ("a1", "a2"):
        p[f"enc0.0.ff.{n}"].value[:] = np.random.default_rng(9).normal(size=p[f"enc0.0.ff.{n}"].shape) * 0.1
    x = Tensor(np.random.default_rng(10).normal(size=(5, 8)), requires_grad=True)
    names = [f"enc0.0.ff.{n}" for n in ("W1", "a1", "W2", "a2")]
    res = grad_check(lambda: D.sum(ff_branch(x, p, "enc0.0")), [x] + [p[n] for n in names])
    assert res.max_rel_error < 1e-4


# ------------------------------------------------------------ gating


def test_zero_gate_gives_mean():
    cfg = tiny_cfg()
    p = init_weights(cfg, dtype=np.float64)
    p["enc0.0.gate.W"].value[:] = 0
    rng = np.random.default_rng(11)
    props = [Tensor(rng.normal(size=(4, 8))) for _ in range(3)]
    out = gated_fusion(Tensor(rng.normal(size=(4, 8))), props, p, "enc0.0", cfg).value
    assert np.allclose(out, np.mean([q.value for q in props], axis=0), atol=1e-14)
    uni = gated_fusion(Tensor(rng.normal(size=(4, 8))), props, {}, "x", tiny_cfg(gating="uniform")).value
    assert np.allclose(uni, out, atol=1e-14)


def test_single_branch_gate_is_identity():
    cfg = tiny_cfg(branches=("ff",))
    p = init_weights(cfg, dtype=np.float64)
    prop = Tensor(np.random.default_rng(12).normal(size=(4, 8)))
    out = gated_fusion(Tensor(np.random.default_rng(13).normal(size=(4, 8))), [prop], p, "enc0.0", cfg)
    assert np.allclose(out.value, prop.value, atol=1e-15)


def test_gate_proposal_count_mismatch():
    cfg = tiny_cfg()
    p = init_weights(cfg)
    with pytest.raises(ValueError):
        gated_fusion(Tensor(np.zeros((2, 8))), [Tensor(np.zeros((2, 8)))] * 2, p, "enc0.0", cfg)


@given(st.integers(0, 10_000))
def test_gate_normalised(seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_cfg()
    p = init_weights(cfg, seed, dtype=np.float64)
    p["enc0.0.gate.W"].value[:] *= 10
    gamma = gate_weights(Tensor(rng.normal(size=(2, 6, 8))), p, "enc0.0", 3).value
    total = gamma.reshape(2, 6, 3, 8).sum(axis=2)
    assert np.abs(total - 1).max() < 1e-6


def test_gate_matches_fusion_oracle():
    cfg = tiny_cfg()
    p = init_weights(cfg, 5, dtype=np.float64)
    rng = np.random.default_rng(14)
    xbar = rng.normal(size=(4, 8))
    props = [rng.normal(size=(4, 8)) for _ in range(3)]
    got = gated_fusion(Tensor(xbar), [Tensor(q) for q in props], p, "enc0.0", cfg).value
    ref = fusion_naive(xbar, props, p["enc0.0.gate.W"].value, p["enc0.0.gate.a"].value)
    assert np.allclose(got, ref, atol=1e-12)


# ------------------------------------------------------------ block


def test_block_zero_branches_is_identity():
    cfg = tiny_cfg()
    p = init_weights(cfg, dtype=np.float64)
    for n in p.names():
        if any(k in n for k in (".local.W", ".global.W_O", ".ff.W2", ".ff.a2")):
            p[n].value[:] = 0
    e = random_graph(np.random.default_rng(15))
    x = np.random.default_rng(16).normal(size=(5, 8))
    out = block_forward(Tensor(x), graph_ops(flat_hierarchy(e)), 0, p, "enc0.0", cfg).value
    assert np.array_equal(out, x)


def test_block_matches_composed_oracles():
    cfg = tiny_cfg()
    p = init_weights(cfg, 9, dtype=np.float64)
    rng = np.random.default_rng(17)
    e = random_graph(rng)
    x = rng.normal(size=(5, 8))
    got = block_forward(Tensor(x), graph_ops(flat_hierarchy(e)), 0, p, "enc0.0", cfg).value
    v = lambda n: p[f"enc0.0.{n}"].value  # noqa: E731
    xbar = layer_norm_naive(x, v("ln.gain"), v("ln.bias"), cfg.ln_eps)
    props = [
        local_branch_naive(xbar, incoming(e), v("local.W"), v("local.a_src"), v("local.a_dst")),
        attention_naive(xbar, v("global.W_Q"), v("global.W_K"), v("global.W_V"), v("global.W_O"), cfg.heads),
        ff_naive(xbar, v("ff.W1"), v("ff.a1"), v("ff.W2"), v("ff.a2")),
    ]
    ref = x + fusion_naive(xbar, props, v("gate.W"), v("gate.a"))
    assert np.allclose(got, ref, rtol=1e-10, atol=1e-12)


# ------------------------------------------------------------ cut embedding


def test_cut_embed_rows():
    table = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(cut_embed(np.zeros(4, int), table).value, np.tile([1.0, 2.0], (4, 1)))
    mixed = cut_embed(np.array([0, 1, 1, 0]), table).value
    assert len({tuple(r) for r in mixed}) == 2
    with pytest.raises(ValueError):
        cut_embed(np.array([0, 2]), table)


def test_cut_embed_gradient_reaches_both_rows(eight_node_mesh):
    cfg = tiny_cfg(cut_enabled=True)
    h = build_hierarchy(eight_node_mesh, cfg.level_ratios)
    p = init_weights(cfg, dtype=np.float64)
    feats = features(eight_node_mesh, np.random.default_rng(18))
    feats.c_cut = np.array([0, 1] * 4)
    with Tape() as tape:
        out = model_forward(feats, h, p, cfg)
        loss = D.sum(D.mul(out, out))
    tape.backward(loss)
    g = p["cut.emb"].grad
    assert np.abs(g[0]).sum() > 0 and np.abs(g[1]).sum() > 0


# ------------------------------------------------------------ full model


def test_zero_weights_zero_output(eight_node_mesh):
    cfg = tiny_cfg()
    h = build_hierarchy(eight_node_mesh, cfg.level_ratios)
    p = init_weights(cfg, dtype=np.float64)
    p["head.W"].value[:] = 0
    out = model_forward(features(eight_node_mesh, np.random.default_rng(19)), h, p, cfg).value
    assert out.shape == (1, 8, 3) and not out.any()


def test_residual_identity_exact(small_bar):
    cfg = tiny_cfg(levels=2, level_ratios=(0.5, 0.5), global_levels=(1, 2))
    h = build_hierarchy(small_bar, cfg.level_ratios, rng_seed=1)
    p = init_weights(cfg, 3, dtype=np.float64)
    for n in p.names():
        if any(k in n for k in (".local.W", ".global.W_O", ".ff.W2", ".ff.a2")):
            p[n].value[:] = 0
    feats = features(small_bar, np.random.default_rng(20))
    A = adapter_forward(Tensor(raw_features(feats, np.float64)[0]), p).value
    enc = [A]
    for l in range(cfg.levels):
        enc.append(pool_max(enc[-1], h.clusters[l]))
    x = enc[-1]
    for l in range(cfg.levels - 1, -1, -1):
        x = unpool_broadcast(x, h.owners[l]) + enc[l]
    ref = x @ p["head.W"].value + p["head.b"].value
    out = model_forward(feats, h, p, cfg).value[0]
    assert np.array_equal(out, ref)


def test_cut_weight_surgery(eight_node_mesh):
    cut_cfg = tiny_cfg(cut_enabled=True)
    plain_cfg = tiny_cfg()
    h = build_hierarchy(eight_node_mesh, cut_cfg.level_ratios)
    pc = init_weights(cut_cfg, 4, dtype=np.float64)
    pc["cut.emb"].value[0] = 0
    pp = init_weights(plain_cfg, 99, dtype=np.float64)
    for n in pp.names():
        pp[n].value[...] = pc[n].value[:7] if n == "adapter.W1" else pc[n].value
    feats = features(eight_node_mesh, np.random.default_rng(21))
    a = model_forward(feats, h, pc, cut_cfg).value
    b = model_forward(feats, h, pp, plain_cfg).value
    assert np.allclose(a, b, rtol=0, atol=1e-14)


@given(st.integers(0, 10_000))
def test_permutation_equivariance_bit_exact(seed):
    mesh = generate_bar_mesh(2, 2, 1)
    cfg = tiny_cfg(levels=2, level_ratios=(0.5, 0.5), global_levels=(1, 2), cut_enabled=True)
    h = build_hierarchy(mesh, cfg.level_ratios, rng_seed=seed)
    p = init_weights(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    f = features(mesh, rng, batch=2, cut=True)
    perm = rng.permutation(mesh.n_nodes)
    fp = NodeFeatures(f.positions[perm], f.signal[:, perm], f.c_bc[:, perm], f.c_cut[:, perm])
    out = model_forward(f, h, p, cfg).value
    outp = model_forward(fp, relabel_hierarchy(h, perm), p, cfg).value
    assert np.array_equal(outp, out[:, perm])


def test_permutation_equivariance_global_on_fine_level():
    # dense attention over relabelled keys sums in a different order: equal up to rounding
    mesh = generate_bar_mesh(1, 1, 1)
    cfg = tiny_cfg(cut_enabled=True)
    h = build_hierarchy(mesh, cfg.level_ratios)
    p = init_weights(cfg, 3, dtype=np.float64)
    rng = np.random.default_rng(3)
    f = features(mesh, rng, batch=2, cut=True)
    perm = rng.permutation(8)
    fp = NodeFeatures(f.positions[perm], f.signal[:, perm], f.c_bc[:, perm], f.c_cut[:, perm])
    out = model_forward(f, h, p, cfg).value
    outp = model_forward(fp, relabel_hierarchy(h, perm), p, cfg).value
    assert np.allclose(outp, out[:, perm], rtol=1e-12, atol=1e-14)


def test_whole_model_gradcheck(eight_node_mesh):
    cfg = tiny_cfg(cut_enabled=True)
    h = build_hierarchy(eight_node_mesh, cfg.level_ratios)
    p = init_weights(cfg, 6, dtype=np.float64)
    rng = np.random.default_rng(22)
    for n, t in p:
        if not t.value.any():  # break symmetric zero init so every tensor is exercised
            t.value[...] = rng.normal(size=t.shape) * 0.1
    feats = features(eight_node_mesh, rng, cut=True)
    R = rng.normal(size=(1, 8, 3)) * 1e-2

    def loss():
        return D.sum(D.mul(model_forward(feats, h, p, cfg), D.constant(R)))

    res = grad_check(loss, [t for _, t in p], max_coords=400, seed=1)
    assert res.max_rel_error < 1e-4, res


def test_batched_matches_single(eight_node_mesh):
    cfg = tiny_cfg()
    h = build_hierarchy(eight_node_mesh, cfg.level_ratios)
    model = SurgFormer.create(cfg, h, seed=1, dtype=np.float64)
    f = features(eight_node_mesh, np.random.default_rng(23), batch=3)
    batched = model.predict(f)
    for b in range(3):
        single = model.predict(NodeFeatures(f.positions, f.signal[b], f.c_bc[b]))
        assert np.allclose(batched[b], single[0], atol=1e-13)


def test_hierarchy_mismatch_rejected(eight_node_mesh):
    cfg = tiny_cfg(levels=2, level_ratios=(0.5, 0.5), global_levels=(2,))
    h = build_hierarchy(eight_node_mesh, (0.5,))
    with pytest.raises(ValueError):
        model_forward(features(eight_node_mesh, np.random.default_rng(0)), h, init_weights(cfg), cfg)


def test_config_roundtrip():
    cfg = ModelConfig(cut_enabled=True, global_levels=(3,))
    again = ModelConfig.from_dict(dataclasses.asdict(cfg))
    assert again == cfg
