import math

import numpy as np
import pytest

from airgraph.adaptive import build_initial_adjacency
from airgraph.graph import scaled_laplacian_from_adjacency
from airgraph.model import ModelConfig, STForecaster, attention, multi_head_attention
from airgraph.moran import knn_weights, moran_targets
from airgraph.tensor import ShapeError, Tensor, gradient_check, softmax
from airgraph.train import joint_loss


def stations(n):
    ang = 2 * np.pi * np.arange(n) / n
    return list(zip(30 + 2 * np.cos(ang), 115 + 2 * np.sin(ang)))


def make_model(seed=0, **kw):
    base = dict(n_nodes=4, in_features=2, in_steps=6, out_steps=2, d_model=8, heads=2, blocks=1,
                cheb_order=2, macro_dim=4, micro_hidden=4, head_hidden=4, aux_hidden=4)
    base.update(kw)
    cfg = ModelConfig(**base)
    return STForecaster(cfg, build_initial_adjacency(stations(cfg.n_nodes)), seed=seed)


def zero_all(model):
    for p in model.params.values():
        p.data = np.zeros_like(p.data)


# -- config ----------------------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(d_model=6, heads=4), dict(blocks=0), dict(out_steps=0),
                                dict(target_index=2), dict(in_steps=2)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        make_model(**kw)


def test_a0_shape_checked():
    with pytest.raises(ShapeError):
        STForecaster(ModelConfig(n_nodes=3, in_features=1), np.eye(4))


# -- attention -------------------------------------------------------------------------------------


def test_attention_zero_query_gives_mean_of_values():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3, 5, 4))
    out = attention(Tensor(np.zeros((3, 5, 4))), Tensor(rng.normal(size=(3, 5, 4))), Tensor(v))
    np.testing.assert_allclose(out.data, np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape),
                               atol=1e-12)


def test_attention_single_step_returns_values():
    rng = np.random.default_rng(1)
    q, k, v = (Tensor(rng.normal(size=(2, 1, 3))) for _ in range(3))
    np.testing.assert_array_equal(attention(q, k, v).data, v.data)


def test_attention_matches_explicit_formula_and_rows_sum_to_one():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
    out, w = attention(Tensor(q), Tensor(k), Tensor(v), return_weights=True)
    s = q @ k.T / 2.0
    e = np.exp(s - s.max(axis=1, keepdims=True))
    ref = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(w.data, ref, atol=1e-12)
    np.testing.assert_allclose(out.data, ref @ v, atol=1e-12)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


def test_single_head_identity_projections_equal_attention():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 3, 5, 4)))
    eye = Tensor(np.eye(4))
    np.testing.assert_allclose(multi_head_attention(x, 1, eye, eye, eye, eye).data,
                               attention(x, x, x).data, atol=1e-12)


def test_mha_shape_and_node_equivariance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5, 6, 8))
    w = [Tensor(rng.normal(size=(8, 8))) for _ in range(4)]
    out = multi_head_attention(Tensor(x), 2, *w).data
    assert out.shape == x.shape
    perm = rng.permutation(5)
    np.testing.assert_allclose(multi_head_attention(Tensor(x[:, perm]), 2, *w).data, out[:, perm],
                               atol=1e-12)


def test_mha_divisibility_error():
    w = [Tensor(np.eye(6)) for _ in range(4)]
    with pytest.raises(ValueError):
        multi_head_attention(Tensor(np.ones((1, 2, 3, 6))), 4, *w)


def test_mha_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    ws = [Tensor(rng.normal(size=(4, 4)) * 0.5) for _ in range(4)]
    f = lambda x, *w: (multi_head_attention(x, 2, *w) ** 2).sum()
    assert gradient_check(f, [x, *ws]) < 1e-4


# -- pieces ----------------------------------------------------------------------------------------


def test_embed_zero_and_node_independent():
    m = make_model()
    m.params["embed.pos"].data[:] = 0.0
    assert np.all(m.embed(Tensor(np.zeros((1, 4, 6, 2)))).data == 0.0)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 4, 6, 2))
    x[0, 2] = x[0, 0]
    e = m.embed(Tensor(x)).data
    assert e.shape == (1, 4, 6, 8)
    np.testing.assert_array_equal(e[0, 0], e[0, 2])


def test_zero_block_is_identity():
    m = make_model(blocks=3)
    for name, p in m.params.items():
        if name.startswith("block"):
            p.data = np.zeros_like(p.data)
    rng = np.random.default_rng(7)
    h = Tensor(rng.normal(size=(2, 4, 6, 8)))
    lt = scaled_laplacian_from_adjacency(Tensor(rng.uniform(size=(2, 4, 4)))).matrix
    out = h
    for i in range(3):
        out = m.st_block(out, lt, i)
    np.testing.assert_array_equal(out.data, h.data)


def test_block_with_zero_graph_and_order_one():
    m = make_model(cheb_order=1)
    rng = np.random.default_rng(8)
    h = Tensor(rng.normal(size=(1, 4, 6, 8)))
    lt = scaled_laplacian_from_adjacency(Tensor(np.zeros((1, 4, 4)))).matrix
    p = m.params
    from airgraph.model import multi_head_attention as mha
    z = mha(h, 2, p["block0.wq"], p["block0.wk"], p["block0.wv"], p["block0.wo"]).data
    expected = h.data + p["block0.cheb.theta"].data[0] * z @ p["block0.cheb.weights"].data[0]
    np.testing.assert_allclose(m.st_block(h, lt, 0).data, expected, atol=1e-12)


# -- forward ---------------------------------------------------------------------------------------


@pytest.mark.parametrize("n,t,tau,c,blocks", [(3, 4, 1, 1, 1), (5, 6, 3, 2, 2), (4, 8, 8, 3, 1)])
def test_forward_shapes(n, t, tau, c, blocks):
    m = make_model(n_nodes=n, in_steps=t, out_steps=tau, in_features=c, blocks=blocks)
    x = np.random.default_rng(n).normal(size=(2, n, t, c))
    y, ym, g = m(x)
    assert y.shape == (2, n, tau, 1) and ym.shape == (2, n, tau, 1)
    assert g.a_fused.shape == (2, n, n)
    y1, ym1, _ = m(x[0])
    assert y1.shape == (n, tau, 1) and ym1.shape == (n, tau, 1)
    np.testing.assert_allclose(y1.data, y.data[0], atol=1e-12)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        make_model()(np.zeros((1, 5, 6, 2)))


def test_all_zero_params_give_zero_outputs():
    m = make_model()
    zero_all(m)
    y, ym, _ = m(np.random.default_rng(9).normal(size=(2, 4, 6, 2)))
    assert np.all(y.data == 0) and np.all(ym.data == 0)


def test_forward_is_deterministic():
    x = np.random.default_rng(10).normal(size=(2, 4, 6, 2))
    a = make_model(seed=3)(x)[0].data
    b = make_model(seed=3)(x)[0].data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, make_model(seed=4)(x)[0].data)


def test_parameter_registry_unique_and_ordered():
    m = make_model(blocks=2)
    names = list(m.params)
    assert len(names) == len(set(names))
    assert names == list(make_model(blocks=2).params)
    assert all(p.name == k for k, p in m.params.items())
    assert m.n_parameters() == sum(p.size for p in m.params.values())


@pytest.mark.parametrize("flag,prefix", [("use_moran", "aux."), ("use_macro", "macro."),
                                         ("use_micro", "micro.")])
def test_ablation_flags_remove_parameter_groups(flag, prefix):
    full = set(make_model().params)
    reduced = set(make_model(**{flag: False}).params)
    removed = full - reduced
    assert removed and all(n.startswith(prefix) for n in removed)


def test_uncertainty_mode_registers_log_variances():
    m = make_model(uncertainty=True)
    assert "loss.log_var_main" in m.params and "loss.log_var_aux" in m.params
    assert "loss.log_var_main" not in make_model(uncertainty=True, use_moran=False).params


def test_ablated_graph_modules():
    m = make_model(use_macro=False, use_micro=False)
    x = np.random.default_rng(11).normal(size=(2, 4, 6, 2))
    g = m.graph(x)
    np.testing.assert_array_equal(g.a_macro.data, np.broadcast_to(m.a0, (2, 4, 4)))
    np.testing.assert_array_equal(g.a_micro.data, 1.0)
    np.testing.assert_allclose(g.a_fused.data[0], m.a0 / m.a0.sum(axis=1, keepdims=True),
                               atol=1e-15)


def _loss_fn(model, x, y, ym):
    names = list(model.params)

    def f(*tensors):
        for name, t in zip(names, tensors):
            model.params[name] = t
        y_hat, ym_hat, _ = model(x)
        return joint_loss(y_hat, y, ym_hat, ym, "fixed", 0.5)

    return f


def test_gradients_finite_and_reach_every_parameter():
    m = make_model()
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 4, 6, 2))
    y = rng.normal(size=(3, 4, 2, 1))
    ym = moran_targets(y, knn_weights(stations(4), 2))
    y_hat, ym_hat, _ = m(x)
    joint_loss(y_hat, y, ym_hat, ym).backward()
    for name, p in m.params.items():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name
    assert np.any(m.params["macro.phi_weight"].grad != 0)
    assert np.any(m.params["micro.conv1"].grad != 0)
    assert np.any(m.params["micro.conv2"].grad != 0)


def test_full_tiny_model_gradient_check(monkeypatch):
    """N=4, T=6, tau=2, d_model=8, h=2, L=1, K=2.

    Central differences are only meaningful where the loss is smooth within +-eps, so the
    test first confirms every ReLU input in the forward pass is at least 1e-3 from zero.
    """
    import airgraph.adaptive as adaptive_mod
    import airgraph.model as model_mod
    from airgraph.tensor import relu

    margins = []

    def watched(a):
        margins.append(np.abs(a.data).min())
        return relu(a)

    m = make_model(seed=0)
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 4, 6, 2))
    y = rng.normal(size=(2, 4, 2, 1))
    ym = moran_targets(y, knn_weights(stations(4), 2))
    with monkeypatch.context() as mp:
        mp.setattr(model_mod, "relu", watched)
        mp.setattr(adaptive_mod, "relu", watched)
        m(x)
    assert len(margins) == 5 and min(margins) > 1e-3
    f = _loss_fn(m, x, y, ym)
    assert gradient_check(f, list(m.params.values())) < 1e-3


def test_predefined_graph_variant_trains():
    from airgraph.train import RMSprop

    m = make_model(use_macro=False, use_micro=False, use_moran=False)
    rng = np.random.default_rng(14)
    x = rng.normal(size=(8, 4, 6, 2))
    y = x[:, :, -2:, :1] * 0.5
    opt = RMSprop(m.params, lr=3e-3)
    losses = []
    for _ in range(60):
        m.zero_grad()
        y_hat, ym_hat, _ = m(x)
        assert ym_hat is None
        loss = joint_loss(y_hat, y, None, None)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]
