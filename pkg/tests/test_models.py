import zipfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlctr.errors import BoundsError, ConfigError, DivergenceError, FormatError, UsageError
from mlctr.models import (CHECKPOINT_FORMAT, Adam, ModelSpec, Samples, build_coupled, build_single,
                          grad_step, load_checkpoint, loss_batch, make_cp_baseline, model_from_factors,
                          predict, save_checkpoint)
from mlctr.sparse import SparseTensor3, Standardizer
from mlctr.synth import cp_dense, dense_reconstruct, fd_gradient


def one_row_model(u, v, t):
    return model_from_factors([np.atleast_2d(u), np.atleast_2d(v), np.atleast_2d(t)])


@pytest.mark.parametrize("u, v, t, want", [
    ((1, 1), (1, 1), (1, 1), 2.0),
    ((1, 0, 0), (0, 1, 0), (3.3, -2.0, 7.0), 0.0),
    ((2, 1), (3, -1), (1, 4), 2.0),
])
def test_predict_hand_values(u, v, t, want):
    m = one_row_model(np.array(u, float), np.array(v, float), np.array(t, float))
    assert predict(m, "X", (0, 0, 0)) == want


def test_predict_errors():
    m = make_cp_baseline((3, 3, 3), 2)
    with pytest.raises(BoundsError):
        predict(m, "X", (0, 3, 0))
    with pytest.raises(UsageError):
        predict(m, "Y", (0, 0, 0))
    with pytest.raises(UsageError):
        predict(m, "Z", (0, 0, 0))


def coupled(seed=0, lam=1.0, layers=1, readout="dot", activation="elu"):
    spec = ModelSpec(rank=3, layers=layers, hidden=2, activation=activation, readout=readout,
                     lam=lam, seed=seed)
    return build_coupled((4, 5, 3), (4, 5, 6), spec)


def test_loss_examples():
    m = one_row_model([1.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    assert loss_batch(m, [("X", 0, 0, 0, 2.0)]) == 0.0
    assert loss_batch(m, [("X", 0, 0, 0, 0.0)]) == 4.0
    c = model_from_factors([np.ones((1, 2))] * 4, ModelSpec(rank=2, lam=0.5))
    assert loss_batch(c, [("Y", 0, 0, 0, 0.0)]) == 2.0
    with pytest.raises(UsageError):
        loss_batch(m, [])


def test_lambda_zero_decouples_loss():
    m0 = coupled(lam=0.0)
    batch = [("X", 1, 2, 0, 0.3), ("Y", 3, 1, 5, -1.0), ("Y", 0, 0, 0, 2.0)]
    assert loss_batch(m0, batch) == loss_batch(m0, batch[:1])


def test_lambda_scaling_doubles_y_part():
    batch = Samples.from_list([("X", 1, 2, 0, 0.3), ("Y", 3, 1, 5, -1.0), ("Y", 0, 4, 2, 2.0)])
    ybatch = batch[batch.tags == 1]
    a, b = coupled(lam=0.7), coupled(lam=1.4)
    assert loss_batch(b, ybatch) == pytest.approx(2 * loss_batch(a, ybatch), rel=1e-15)
    ga, gb = a.gradient(ybatch), b.gradient(ybatch)
    for k in ga:
        np.testing.assert_allclose(gb[k], 2 * ga[k], rtol=1e-14, atol=1e-300)
    xa = a.gradient(batch[batch.tags == 0])
    full_a, full_b = a.gradient(batch), b.gradient(batch)
    for k in full_a:
        np.testing.assert_allclose(full_b[k] - xa[k], 2 * (full_a[k] - xa[k]), rtol=1e-12, atol=1e-13)


def test_grad_step_zero_residual_is_noop():
    m = make_cp_baseline((3, 3, 3), 2, seed=1)
    before = {k: v.copy() for k, v in m.parameters().items()}
    target = m.predict("X", 1, 2, 0)
    grad_step(m, [("X", 1, 2, 0, target)], lr=0.1)
    for k, v in m.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_grad_step_cp_closed_form():
    m = make_cp_baseline((3, 4, 5), 3, seed=2)
    U, V, T = (m.nets[n].base.copy() for n in "UVT")
    i, j, k, x, lr = 1, 3, 2, 0.7, 0.05
    e = float(np.sum(U[i] * V[j] * T[k])) - x
    grad_step(m, [("X", i, j, k, x)], lr)
    np.testing.assert_allclose(m.nets["U"].base[i], U[i] - lr * e * V[j] * T[k], rtol=1e-15, atol=1e-16)
    np.testing.assert_allclose(m.nets["V"].base[j], V[j] - lr * e * U[i] * T[k], rtol=1e-15, atol=1e-16)
    others = np.delete(np.arange(3), i)
    np.testing.assert_array_equal(m.nets["U"].base[others], U[others])


def random_batch(model, n, rng):
    rows = []
    for _ in range(n):
        tag = "Y" if "Y" in model.tensors and rng.random() < 0.5 else "X"
        d = model.dims(tag)
        rows.append((tag, *(int(rng.integers(s)) for s in d), float(rng.normal())))
    return Samples.from_list(rows)


@pytest.mark.parametrize("seed", range(20))
def test_small_step_descends(seed):
    rng = np.random.default_rng(seed)
    layers = int(rng.integers(0, 4))
    readout = ["dot", "mlp"][seed % 2]
    act = ["elu", "sigmoid", "identity", "relu"][seed % 4]
    m = coupled(seed=seed, layers=layers, readout=readout, activation=act)
    batch = random_batch(m, 16, rng)
    before = loss_batch(m, batch)
    assert grad_step(m, batch, 1e-4) == before
    assert loss_batch(m, batch) < before


def flat_params(model):
    params = model.parameters()
    names = sorted(params)
    return names, params


def fd_check(model, batch):
    names, params = flat_params(model)
    shapes = [params[n].shape for n in names]
    flat0 = np.concatenate([params[n].ravel() for n in names])

    def loss(flat):
        off = 0
        for n, s in zip(names, shapes):
            size = int(np.prod(s))
            params[n][...] = flat[off:off + size].reshape(s)
            off += size
        return model.loss(batch)

    fd = fd_gradient(loss, flat0)
    loss(flat0)
    g = model.gradient(batch)
    an = np.concatenate([g[n].ravel() for n in names])
    return np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12)


@pytest.mark.parametrize("readout", ["dot", "mlp"])
@pytest.mark.parametrize("activation", ["elu", "sigmoid", "identity"])
def test_full_model_gradient_every_parameter_class(readout, activation):
    m = coupled(seed=3, layers=2, readout=readout, activation=activation)
    batch = random_batch(m, 12, np.random.default_rng(5))
    names = set(m.parameters())
    assert {"U.base", "U.P0", "U.Q1", "W.base"} <= names
    if readout == "mlp":
        assert {"head_X.W1", "head_Y.w2", "head_X.b1", "head_Y.b2"} <= names
    assert fd_check(m, batch) < 1e-5


def test_sharing_is_observable():
    m = coupled(seed=1)
    assert m.nets["U"] is m.nets["U"]
    x_before = m.predict("X", 2, 1, 0)
    grad_step(m, [("Y", 2, 1, 4, 5.0)], lr=0.05)
    assert m.predict("X", 2, 1, 0) != x_before


def test_masked_updates():
    m = coupled(seed=2, readout="mlp")
    t0 = {k: v.copy() for k, v in m.parameters().items() if k.startswith(("T.", "head_X"))}
    grad_step(m, [("Y", 1, 1, 1, 3.0), ("Y", 0, 2, 5, -1.0)], lr=0.05)
    for k, v in t0.items():
        assert m.parameters()[k].tobytes() == v.tobytes()
    w0 = {k: v.copy() for k, v in m.parameters().items() if k.startswith(("W.", "head_Y"))}
    grad_step(m, [("X", 1, 1, 1, 3.0)], lr=0.05)
    for k, v in w0.items():
        assert m.parameters()[k].tobytes() == v.tobytes()
    assert m.parameters()["T.base"].tobytes() != t0["T.base"].tobytes()


def test_divergence_is_reported():
    m = make_cp_baseline((2, 2, 2), 1)
    m.nets["U"].base[0, 0] = np.inf
    with pytest.raises(DivergenceError, match="non-finite"):
        grad_step(m, [("X", 0, 0, 0, 1.0)], lr=0.1)


def test_grad_step_rejects_bad_lr():
    with pytest.raises(UsageError):
        grad_step(make_cp_baseline((2, 2, 2), 1), [("X", 0, 0, 0, 1.0)], lr=0.0)


def test_cp_baseline_structure_and_dense_oracle():
    m = make_cp_baseline((4, 4, 4), 3, seed=9)
    assert all(not k.endswith(("P0", "Q0")) for k in m.parameters())
    dense = np.zeros((4, 4, 4))
    U, V, T = (m.nets[n].base for n in "UVT")
    for i in range(4):
        for j in range(4):
            for k in range(4):
                dense[i, j, k] = sum(U[i, s] * V[j, s] * T[k, s] for s in range(3))
    np.testing.assert_allclose(dense_reconstruct(m), dense, atol=1e-12)


def test_cp_baseline_fits_exact_rank_two():
    rng = np.random.default_rng(0)
    F = [rng.normal(size=(8, 2)) for _ in range(3)]
    t = SparseTensor3.from_dense(cp_dense(*F))
    m = make_cp_baseline(t.dims, 2, seed=0)
    s = Samples.from_tensor(t)
    order_rng = np.random.default_rng(1)
    for _ in range(400):
        order = order_rng.permutation(len(s))
        for lo in range(0, len(s), 16):
            grad_step(m, s[order[lo:lo + 16]], 0.02)
    rmse = np.sqrt(m.loss(s) / len(s))
    assert rmse < 0.01


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(rank=0)
    with pytest.raises(ConfigError):
        ModelSpec(lam=-1)
    with pytest.raises(ConfigError):
        ModelSpec(readout="conv")
    with pytest.raises(ConfigError):
        ModelSpec(layers=1, hidden=0)
    with pytest.raises(ConfigError):
        build_coupled((3, 4, 5), (4, 4, 5), ModelSpec())


def test_mlp_readout_defaults_to_width_2r():
    m = build_single((3, 3, 3), ModelSpec(rank=5, readout="mlp"))
    assert m.heads["X"].W1.shape == (5, 10)


def test_adam_only_moves_touched_networks():
    m = coupled(seed=4)
    opt = Adam()
    w0 = m.nets["W"].base.copy()
    grad_step(m, [("X", 0, 0, 0, 1.0)], 0.01, optimizer=opt)
    assert m.nets["W"].base.tobytes() == w0.tobytes()
    assert not any(k.startswith("W.") for k in opt.m)


@pytest.mark.parametrize("readout", ["dot", "mlp"])
def test_checkpoint_roundtrip(tmp_path, readout):
    m = coupled(seed=6, readout=readout, layers=2)
    std = {"X": Standardizer(1.5, 2.0), "Y": Standardizer(-1.0, 0.5)}
    path = save_checkpoint(tmp_path / "m.ckpt", m, std, {"note": "x"})
    back, stds, extra = load_checkpoint(path)
    assert back.kind == "coupled" and extra == {"note": "x"}
    assert stds["X"] == std["X"]
    assert back.nets["U"] is back.nets["U"]
    for k, v in m.parameters().items():
        assert back.parameters()[k].tobytes() == v.tobytes()
    idx = np.array([[1, 2, 0], [3, 4, 2]])
    np.testing.assert_array_equal(back.predict_many("X", idx), m.predict_many("X", idx))


def test_checkpoint_bytes_are_reproducible(tmp_path):
    a = save_checkpoint(tmp_path / "a.ckpt", coupled(seed=1))
    b = save_checkpoint(tmp_path / "b.ckpt", coupled(seed=1))
    assert a.read_bytes() == b.read_bytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_checkpoint_format_mismatch(tmp_path):
    p = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(p, "w") as zf:
        zf.writestr("manifest.json", '{"format": "something-else/9"}')
    with pytest.raises(FormatError, match=CHECKPOINT_FORMAT):
        load_checkpoint(p)
    (tmp_path / "junk.ckpt").write_text("not a zip")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "junk.ckpt")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10**6))
def test_depth_zero_equals_cp(d1, d2, d3, r, seed):
    m = make_cp_baseline((d1, d2, d3), r, seed=seed)
    want = cp_dense(*(m.nets[n].base for n in "UVT"))
    np.testing.assert_allclose(dense_reconstruct(m), want, rtol=0, atol=1e-12)
