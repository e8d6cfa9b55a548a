import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dptraj.errors import DataError
from dptraj.nn import (BiasGrad, DenseGrad, DenseLayer, RowGrad, TiNetwork, TpgNetwork, cross_entropy,
                       dense_forward, kl_standard_normal, load_model, per_example_backward,
                       per_example_norms, reparameterize, save_model, softmax)
from oracles import fd_gradient, relative_error


def test_dense_forward_examples():
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.all(dense_forward(x, DenseLayer(np.zeros((3, 2)), np.zeros(2), "relu")) == 0)
    assert np.allclose(dense_forward(x, DenseLayer(np.eye(3), np.zeros(3), "linear")), x)
    assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    with pytest.raises(ValueError):
        dense_forward(x, DenseLayer(np.zeros((2, 2)), np.zeros(2), "relu"))


def test_softmax_stable():
    p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-12


def test_cross_entropy_examples():
    assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
    assert cross_entropy(np.full(121, 1 / 121), 7) == pytest.approx(math.log(121))
    assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(27.631021115928547)
    with pytest.raises(IndexError):
        cross_entropy(np.array([0.5, 0.5]), 2)


def test_reparameterize(rng):
    assert np.allclose(reparameterize(np.ones(3), np.zeros(3), np.zeros(3)), 1.0)
    noise = rng.standard_normal(3)
    assert np.allclose(reparameterize(np.zeros(3), np.zeros(3), noise), noise)
    z = reparameterize(0.0, math.log(2.5), rng.standard_normal(100_000))
    assert abs(z.var() / 2.5 - 1) < 0.03


def test_kl_examples():
    assert kl_standard_normal(np.zeros(4), np.zeros(4)) == 0
    assert kl_standard_normal(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_kl_nonnegative(mean, log_var):
    k = min(len(mean), len(log_var))
    assert kl_standard_normal(np.array(mean[:k]), np.array(log_var[:k])) >= -1e-12


def test_factored_gradients_match_materialized(rng):
    x, d = rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
    g = DenseGrad(x, d)
    full = np.stack([g.example(i) for i in range(4)])
    assert np.allclose(g.sq_norms(), (full ** 2).sum(axis=(1, 2)))
    w = rng.random(4)
    assert np.allclose(g.weighted_sum(w), np.einsum("b,bij->ij", w, full))
    b = BiasGrad(d)
    assert np.allclose(b.weighted_sum(w), w @ d)
    idx = np.array([[0, 2], [1, 1], [3, 0], [2, 2]])
    rows = rng.standard_normal((4, 2, 3))
    r = RowGrad(idx, rows, (5, 3))
    full = np.stack([r.example(i) for i in range(4)])
    assert np.allclose(r.sq_norms(), (full ** 2).sum(axis=(1, 2)))
    assert np.allclose(r.weighted_sum(w), np.einsum("b,bij->ij", w, full))


def _ti_example(net, rng):
    n = net.n_cells
    return {"src": [int(rng.integers(n))], "dst": [int(rng.integers(n))], "hour": [int(rng.integers(net.n_hours))],
            "noise": rng.standard_normal((1, net.latent))}


def _tpg_example(net, rng):
    n = net.n_cells
    return {"cur": [int(rng.integers(n))], "dst": [int(rng.integers(n))], "hour": [int(rng.integers(net.n_hours))],
            "label": [int(rng.integers(net.n_classes))]}


@pytest.mark.parametrize("seed", range(5))
def test_ti_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = TiNetwork(int(rng.integers(2, 8)), hidden=5, latent=3, n_hours=4, seed=seed)
    ex = _ti_example(net, rng)
    assert relative_error(per_example_backward(net, ex).vector, fd_gradient(net, ex)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_tpg_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = TpgNetwork(int(rng.integers(2, 8)), embed_dim=3, hidden=6, n_classes=9, n_hours=24, seed=seed)
    ex = _tpg_example(net, rng)
    assert relative_error(per_example_backward(net, ex).vector, fd_gradient(net, ex)) < 1e-4


def test_same_cell_embedding_gradient():
    # current == destination hits one embedding row twice
    net = TpgNetwork(3, embed_dim=2, hidden=4, n_classes=9, seed=1)
    ex = {"cur": [1], "dst": [1], "hour": [5], "label": [2]}
    assert relative_error(per_example_backward(net, ex).vector, fd_gradient(net, ex)) < 1e-4


def test_batch_parts_equal_per_example(rng):
    net = TiNetwork(6, hidden=5, latent=3, n_hours=4, seed=0)
    batch = {"src": [0, 1, 1], "dst": [2, 2, 5], "hour": [0, 3, 1], "noise": rng.standard_normal((3, 3))}
    losses, parts = net.forward_backward(batch)
    norms = per_example_norms(parts)
    for i in range(3):
        one = {k: np.asarray(v)[i:i + 1] for k, v in batch.items()}
        g = per_example_backward(net, one)
        assert norms[i] == pytest.approx(g.l2_norm, rel=1e-9)
        assert g.l2_norm == pytest.approx(np.linalg.norm(g.vector), rel=1e-9)


def test_logit_gradient_identity(rng):
    net = TpgNetwork(4, embed_dim=2, hidden=3, n_classes=9, seed=0)
    ex = {"cur": [0], "dst": [3], "hour": [2], "label": [4]}
    _, parts = net.forward_backward(ex)
    p = net.probs([0], [3], [2])[0]
    assert np.allclose(parts["out.b"].example(0), p - np.eye(9)[4])


def test_unused_block_has_zero_gradient():
    net = TpgNetwork(5, embed_dim=2, hidden=3, n_classes=9, seed=0)
    g = per_example_backward(net, {"cur": [0], "dst": [1], "hour": [0], "label": [1]})
    emb = g.vector[:net.params["embed.E"].size].reshape(5, 2)
    assert np.all(emb[2:] == 0)


def test_ti_input_dim():
    assert TiNetwork(848, hidden=2, latent=2).input_dim == 1720
    assert TiNetwork(2851, hidden=2, latent=2).input_dim == 5726


def test_tpg_shapes_and_uniform():
    net = TpgNetwork(10, seed=0)
    assert net.input_dim == 101
    p = net.probs([0, 1], [2, 3], [0, 23])
    assert np.allclose(p.sum(axis=1), 1) and np.all(p > 0)
    assert np.allclose(net.features([0], [1], [23])[:, -1], 1.0)
    net.params["out.W"][:] = 0
    assert np.allclose(net.probs([0], [1], [5]), 1 / 121)


def test_ti_zero_loss_when_decoder_exact():
    net = TiNetwork(3, hidden=2, latent=2, n_hours=2, seed=0)
    for k in list(net.params):
        net.params[k][:] = 0
    # one-hot heads through huge biases, mean = log_var = 0
    for head, label in (("src", 1), ("dst", 2), ("hour", 0)):
        net.params[f"{head}.b"][label] = 1e3
    losses, _ = net.forward_backward({"src": [1], "dst": [2], "hour": [0], "noise": np.zeros((1, 2))})
    assert losses[0] == pytest.approx(0.0, abs=1e-12)


def test_ti_uniform_heads_loss():
    net = TiNetwork(848, hidden=4, latent=2, seed=0)
    for k in list(net.params):
        net.params[k][:] = 0
    losses, _ = net.forward_backward({"src": [3], "dst": [5], "hour": [7], "noise": np.zeros((1, 2))})
    assert losses[0] == pytest.approx(2 * math.log(848) + math.log(24))
    assert losses[0] == pytest.approx(16.66, abs=0.01)


def test_model_file_roundtrip(tmp_path):
    net = TpgNetwork(5, embed_dim=2, hidden=3, n_classes=9, seed=4)
    p = tmp_path / "m.mdl"
    save_model(p, net, {"x": 1})
    assert p.read_bytes()[:9] == b"PTRAJMDL1"
    back, meta = load_model(p, "TPG")
    assert meta == {"x": 1}
    assert np.array_equal(back.flatten(), net.flatten())
    with pytest.raises(DataError):
        load_model(p, "TI")
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_model(tmp_path / "junk")


def test_flatten_order():
    net = TiNetwork(2, hidden=2, latent=1, n_hours=2)
    assert net.names[:2] == ["enc1.W", "enc1.b"] and net.names[-2:] == ["hour.W", "hour.b"]
    copy = net.copy()
    assert np.array_equal(copy.flatten(), net.flatten())
    with pytest.raises(ValueError):
        net.load_flat(np.zeros(3))
