import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlctr.embedding import (Activation, EmbeddingNetwork, backward_row, forward_row,
                             init_network)
from mlctr.errors import BoundsError, ConfigError, TapeError
from mlctr.synth import fd_gradient

KINDS = ["relu", "elu", "sigmoid", "identity"]


@pytest.mark.parametrize("kind", KINDS)
def test_activation_derivative_matches_fd(kind):
    act = Activation(kind)
    x = np.linspace(-3.0, 3.0, 61)
    x = x[np.abs(x) > 1e-3]
    h = 1e-6
    fd = (act(x + h) - act(x - h)) / (2 * h)
    np.testing.assert_allclose(act.deriv(x), fd, atol=1e-6)


def test_elu_alpha_and_kink():
    act = Activation("elu", elu_alpha=2.0)
    assert act(np.array([-np.inf]))[0] == -2.0
    assert act.has_kink
    assert not Activation("elu").has_kink
    assert Activation("relu").has_kink


def test_relu_subgradient_zero_at_kink():
    assert Activation("relu").deriv(np.array([0.0]))[0] == 0.0


def test_sigmoid_is_stable_for_large_inputs():
    with np.errstate(over="raise"):
        out = Activation("sigmoid")(np.array([-1000.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_unknown_activation():
    with pytest.raises(ConfigError):
        Activation("tanh")


def test_depth_zero_row_is_base():
    net = init_network(5, 3, layers=0, seed=1)
    emb, tape = forward_row(net, 2)
    np.testing.assert_array_equal(emb, net.base[2])
    np.testing.assert_array_equal(net.output_matrix(), net.base)


def test_zero_hidden_relu_kills_negatives():
    net = EmbeddingNetwork([[-1.0, 2.0]], [np.zeros((1, 3))], [np.zeros((3, 2))], Activation("relu"))
    emb, _ = forward_row(net, 0)
    np.testing.assert_array_equal(emb, [0.0, 2.0])


def test_identity_activation_collapses_to_sum():
    rng = np.random.default_rng(0)
    d, r, h = 6, 3, 2
    base = rng.normal(size=(d, r)) * 0.1
    P = [rng.normal(size=(d, h)) * 0.1 for _ in range(2)]
    Q = [rng.normal(size=(h, r)) * 0.1 for _ in range(2)]
    net = EmbeddingNetwork(base, P, Q, Activation("identity"))
    want = base + P[0] @ Q[0] + P[1] @ Q[1]
    np.testing.assert_allclose(net.output_matrix(), want, rtol=1e-14, atol=1e-15)
    for i in range(d):
        np.testing.assert_allclose(forward_row(net, i)[0], want[i], rtol=1e-14, atol=1e-15)


def test_forward_row_bounds():
    net = init_network(4, 2, seed=0)
    with pytest.raises(BoundsError):
        forward_row(net, 4)
    with pytest.raises(BoundsError):
        forward_row(net, -1)


def test_tape_replay_bit_exact():
    net = init_network(7, 3, layers=3, hidden_width=2, activation=Activation("elu"), seed=4)
    emb, tape = forward_row(net, 5)
    assert tape.replay(net).tobytes() == emb.tobytes()
    assert tape.output.tobytes() == emb.tobytes()


def test_backward_depth_zero_is_grad_out():
    net = init_network(4, 3, seed=0)
    _, tape = forward_row(net, 1)
    g = np.array([0.5, -1.0, 2.0])
    grads = backward_row(net, tape, g)
    np.testing.assert_array_equal(grads.base, g)
    assert grads.P == [] and grads.Q == []


def test_backward_identity_one_layer_q_is_outer_product():
    rng = np.random.default_rng(2)
    net = EmbeddingNetwork(rng.normal(size=(3, 2)), [rng.normal(size=(3, 4))], [rng.normal(size=(4, 2))],
                           Activation("identity"))
    _, tape = forward_row(net, 1)
    g = np.array([1.5, -0.5])
    grads = backward_row(net, tape, g)
    np.testing.assert_allclose(grads.Q[0], np.outer(net.P[0][1], g), rtol=1e-15)
    np.testing.assert_allclose(grads.P[0], net.Q[0] @ g, rtol=1e-15)
    np.testing.assert_array_equal(grads.base, g)


def test_stale_tape_rejected():
    net = init_network(4, 2, layers=1, hidden_width=2, seed=0)
    _, tape = forward_row(net, 0)
    grads = backward_row(net, tape, np.ones(2))
    from mlctr.embedding import NetGrads
    net.apply(NetGrads(np.array([0]), grads.base[None], [p[None] for p in grads.P], grads.Q), 0.1)
    with pytest.raises(TapeError):
        backward_row(net, tape, np.ones(2))
    with pytest.raises(TapeError):
        tape.replay(net)


def _row_fd_check(net, i, w):
    """Compare backward_row against finite differences of L = w . emb_i."""
    names = list(net.parameters())
    params = net.parameters()
    shapes = [params[n].shape for n in names]
    flat0 = np.concatenate([params[n].ravel() for n in names])

    def loss(flat):
        off = 0
        for n, s in zip(names, shapes):
            size = int(np.prod(s))
            params[n][...] = flat[off:off + size].reshape(s)
            off += size
        return float(w @ net.forward(np.array([i]))[0][0])

    fd = fd_gradient(loss, flat0)
    loss(flat0)
    _, tape = forward_row(net, i)
    g = backward_row(net, tape, w)
    dense = {n: np.zeros(s) for n, s in zip(names, shapes)}
    if f"{net.name}.base" in dense:
        dense[f"{net.name}.base"][i] = g.base
    for j in range(net.layers):
        dense[f"{net.name}.P{j}"][i] = g.P[j]
        dense[f"{net.name}.Q{j}"] = g.Q[j]
    an = np.concatenate([dense[n].ravel() for n in names])
    return np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12)


@pytest.mark.parametrize("kind", ["elu", "sigmoid", "identity"])
def test_backward_row_matches_fd_depth_three(kind):
    net = init_network(5, 3, layers=3, hidden_width=2, activation=Activation(kind), seed=11)
    w = np.random.default_rng(0).normal(size=3)
    assert _row_fd_check(net, 2, w) < 1e-5


def test_backward_row_fd_relu_away_from_kink():
    for seed in range(50):
        net = init_network(5, 3, layers=2, hidden_width=2, activation=Activation("relu"), seed=seed)
        if net.kink_distance([2]) > 1e-3:
            break
    w = np.random.default_rng(0).normal(size=3)
    assert _row_fd_check(net, 2, w) < 1e-5


@pytest.mark.parametrize("layers", [1, 5, 34])
def test_bypass_gradient_survives_depth(layers):
    base = np.array([[0.7, -0.3, 1.2]])
    net = EmbeddingNetwork(base, [np.zeros((1, 2))] * layers, [np.zeros((2, 3))] * layers, Activation("relu"))
    _, tape = forward_row(net, 0)
    g = np.array([1.0, 2.0, -3.0])
    grads = backward_row(net, tape, g)
    np.testing.assert_array_equal(grads.base, g * (base[0] > 0))


def test_init_deterministic():
    a = init_network(10, 3, layers=2, hidden_width=4, seed=7)
    b = init_network(10, 3, layers=2, hidden_width=4, seed=7)
    for (na, pa), (nb, pb) in zip(a.parameters().items(), b.parameters().items()):
        assert na == nb and pa.tobytes() == pb.tobytes()


def test_init_base_scale():
    net = init_network(100, 4, seed=0)
    assert abs(net.base.std() - 0.5) < 0.1


def test_init_depth_zero_has_no_hidden():
    net = init_network(10, 3, layers=0, seed=0)
    assert net.P == [] and net.Q == []
    assert set(net.parameters()) == {"U.base"}


@pytest.mark.parametrize("args", [(0, 2), (3, 0), (-1, 2)])
def test_init_rejects_bad_dims(args):
    with pytest.raises(ConfigError):
        init_network(*args)


def test_freeze_base_zeroes_without_touching_caller_array():
    base = np.ones((3, 2))
    net = EmbeddingNetwork(base, [np.ones((3, 1))], [np.ones((1, 2))], freeze_base=True)
    np.testing.assert_array_equal(net.base, 0.0)
    np.testing.assert_array_equal(base, 1.0)
    assert "U.base" not in net.parameters()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 3), st.integers(1, 3),
       st.sampled_from(KINDS), st.integers(0, 10**6))
def test_output_shapes_and_finiteness(d, r, layers, h, kind, seed):
    net = init_network(d, r, layers, h, Activation(kind), seed=seed)
    full = net.output_matrix()
    assert full.shape == (d, r) and np.isfinite(full).all()
    emb, _ = forward_row(net, d - 1)
    assert emb.shape == (r,)
    np.testing.assert_allclose(emb, full[d - 1], rtol=1e-14, atol=1e-15)
