import numpy as np
import pytest

from mshgfn import autodiff as ad
from mshgfn.gradcheck import TINY, model_gradcheck
from mshgfn.graph import stock_graph
from mshgfn.model import ABLATIONS, MSHGFN, ForwardTrace, ModelConfig, init_params, param_groups

SMALL = ModelConfig(n_stocks=8, window=16, n_scales=3)


def batch(cfg, b=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, cfg.n_stocks, cfg.window, cfg.n_features)), rng.integers(0, 2, size=(b, cfg.n_stocks))


def traced(model, x):
    trace = ForwardTrace()
    model.forward(x, trace=trace)
    return trace


def test_forward_invariants():
    model = MSHGFN(SMALL, seed=1)
    x, _ = batch(SMALL)
    tr = traced(model, x)
    assert [lv.shape[-2] for lv in tr.pyramid] == [16, 8, 4]
    for r, raw, a_hat in zip(tr.attribute_adjacency, tr.raw_adjacency, tr.norm_adjacency):
        assert np.max(np.abs(r.data.sum(-1) - 1.0)) < 1e-9
        a = raw.data
        assert np.max(np.abs(a - np.swapaxes(a, -1, -2))) < 1e-9
        assert np.max(np.abs(np.diagonal(a, axis1=-2, axis2=-1) - 1.0)) < 1e-9
        assert np.all((a >= -1.0 - 1e-12) & (a <= 1.0 + 1e-12))
        assert np.max(np.abs(a_hat.data.sum(-1) - 1.0)) < 1e-9
    for alpha in tr.gates:
        assert np.all((alpha.data > 0) & (alpha.data < 1))
    probs = ad.softmax(tr.logits).data
    assert np.max(np.abs(probs.sum(-1) - 1.0)) < 1e-9
    assert tr.fused.shape == (3, 8, 5)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_scale_counts(k):
    cfg = ModelConfig(n_stocks=4, window=16, n_scales=k)
    model = MSHGFN(cfg)
    x, _ = batch(cfg, b=2)
    tr = traced(model, x)
    assert len(tr.spatial) == k and len(tr.gates) == k - 1
    assert sum(n.startswith("fusion.W_a") for n in model.params) == k - 1


def test_wrong_input_shape():
    with pytest.raises(ad.DimensionError):
        MSHGFN(SMALL).forward(np.zeros((2, 8, 15, 5)))


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        ModelConfig(n_stocks=4, window=8, heads=2)
    assert ModelConfig(n_stocks=4, window=8, model_dim=64, heads=4).dim == 64


def test_stock_permutation_equivariance():
    model = MSHGFN(SMALL, seed=2)
    x, _ = batch(SMALL, b=2, seed=3)
    perm = np.random.default_rng(4).permutation(SMALL.n_stocks)
    permuted = {}
    for name, t in model.params.items():
        per_stock = name.endswith((".E1", ".E2"))
        permuted[name] = ad.tensor(t.data[perm] if per_stock else t.data, requires_grad=True, name=name)
    base, moved = traced(model, x), traced(MSHGFN(SMALL, permuted), x[:, perm])
    for a, b in zip(base.raw_adjacency, moved.raw_adjacency):
        assert np.allclose(b.data, a.data[:, perm][:, :, perm], atol=1e-12)
    for a, b in zip(base.spatial, moved.spatial):
        assert np.allclose(b.data, a.data[:, perm], atol=1e-12)
    assert np.allclose(moved.logits.data, base.logits.data[:, perm], atol=1e-12)


def test_stock_graph_is_rebuilt_per_window():
    # stocks 0 and 1 move together in one window and against each other in the other
    cfg = ModelConfig(n_stocks=3, window=8, n_scales=1, shared_adaptive=True)
    p = init_params(cfg, seed=5)
    rng = np.random.default_rng(6)
    base = rng.normal(size=(8, 5))
    together = np.stack([base, base, rng.normal(size=(8, 5))])
    opposed = np.stack([base, -base, together[2]])
    raw, a_hat, _ = stock_graph(ad.tensor(np.stack([together, opposed])), p, "graph.1", shared=True)
    # the attribute GCN ends in a ReLU, so opposite series have disjoint supports
    assert abs(raw.data[0, 0, 1] - 1.0) < 1e-12
    assert raw.data[1, 0, 1] == 0.0
    assert a_hat.data[0, 0, 1] > 0.0 and a_hat.data[1, 0, 1] == 0.0


def test_every_group_gets_gradient():
    model = MSHGFN(SMALL, seed=7)
    x, y = batch(SMALL, seed=8)
    ad.backward(model.loss(x, y))
    for group, names in param_groups(model.params).items():
        assert any(np.any(model.params[n].grad != 0) for n in names), group


def test_eval_forward_is_bit_identical():
    model = MSHGFN(SMALL, seed=9)
    x, _ = batch(SMALL)
    assert np.array_equal(model.forward(x).data, model.forward(x).data)


def test_dropout_only_in_training():
    model = MSHGFN(SMALL, seed=10)
    x, _ = batch(SMALL)
    a = model.forward(x, training=True, rng=np.random.default_rng(0)).data
    b = model.forward(x, training=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


def test_same_seed_same_parameters():
    a, b = init_params(SMALL, seed=3), init_params(SMALL, seed=3)
    assert list(a) == list(b)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)


def test_tiny_model_gradcheck():
    model = MSHGFN(TINY, seed=0)
    x, y = batch(TINY, b=2, seed=11)
    errors = model_gradcheck(model, x, y)
    assert max(errors.values()) < 1e-4, errors


# ---------------------------------------------------------------- ablations


def test_ablation_parameter_census():
    names = {ab: set(MSHGFN(ModelConfig(4, 8, n_scales=2, ablation=ab)).params) for ab in ABLATIONS}
    full = names["none"]
    assert not any(n.startswith("graph") and not n.endswith("W_g") for n in names["no_features_sr"])
    assert names["no_features_sr"] == {n for n in full if n.split(".")[-1] not in ("E1", "E2", "W_c")}
    assert "fusion.W_cat" in names["concat_fusion"] and not any(n.startswith("fusion.W_a") for n in names["concat_fusion"])
    assert not any(n.startswith("temporal") for n in names["lstm_temporal"])
    assert {n for n in names["lstm_temporal"] if n.startswith("lstm")} == {
        f"lstm.{k}.{w}" for k in (1, 2) for w in ("W_x", "W_h", "b")
    }


def test_no_features_sr_propagates_over_identity():
    model = MSHGFN(ModelConfig(4, 8, n_scales=2, ablation="no_features_sr"))
    tr = traced(model, batch(model.cfg, b=1)[0])
    assert all(np.array_equal(a, np.eye(4)) for a in tr.norm_adjacency)


def test_apply_ablation_keeps_shared_values():
    full = MSHGFN(ModelConfig(4, 8, n_scales=2), seed=12)
    variant = full.with_ablation("concat_fusion", seed=13)
    for name, t in variant.params.items():
        if name in full.params:
            assert np.array_equal(t.data, full.params[name].data)
            assert t is not full.params[name]
    assert full.with_ablation("none") is full
    with pytest.raises(ValueError):
        full.with_ablation("bogus")


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_ablations_run_and_backprop(ablation):
    cfg = ModelConfig(4, 8, n_scales=2, ablation=ablation)
    model = MSHGFN(cfg, seed=14)
    x, y = batch(cfg, b=2)
    loss = model.loss(x, y)
    ad.backward(loss)
    assert np.isfinite(loss.item())
    assert all(p.grad is not None for p in model.params.values())
