import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anomattr import nn
from anomattr.errors import NonFiniteLoss, ShapeMismatch

from conftest import random_network

LOG_2PI = np.log(2 * np.pi)


def test_dense_examples():
    zero = {"W": np.zeros((3, 2)), "b": np.zeros(3)}
    assert nn.dense_forward(zero, [1.0, -2.0], "relu").tolist() == [0, 0, 0]
    ident = {"W": np.eye(3), "b": np.zeros(3)}
    assert nn.dense_forward(ident, [1.0, -2.0, 3.0]).tolist() == [1.0, -2.0, 3.0]
    p = {"W": np.array([[1.0, -1.0]]), "b": np.array([0.5])}
    assert nn.dense_forward(p, [2.0, 1.0], "relu").tolist() == [1.5]


def test_dense_shape_error():
    with pytest.raises(ShapeMismatch):
        nn.dense_forward({"W": np.eye(2), "b": np.zeros(2)}, [1.0, 2.0, 3.0])


def test_lstm_zero_weights():
    p = {"Wx": np.zeros((8, 3)), "Wh": np.zeros((8, 2)), "b": np.zeros(8)}
    hs, h, c = nn.lstm_forward(p, np.ones((5, 3)))
    assert np.all(hs == 0) and np.all(h == 0) and np.all(c == 0)


def _sig(v):
    return 1 / (1 + np.exp(-v))


def test_lstm_single_step_scalar_oracle():
    wx, wh, b = np.array([0.3, -0.2, 0.5, 0.7]), np.array([0.1, 0.4, -0.3, 0.2]), np.array([0.05, 1.0, -0.1, 0.2])
    x, h0, c0 = 0.8, 0.25, -0.5
    a = wx * x + wh * h0 + b
    c1 = _sig(a[1]) * c0 + _sig(a[0]) * np.tanh(a[2])
    h1 = _sig(a[3]) * np.tanh(c1)
    p = {"Wx": wx[:, None], "Wh": wh[:, None], "b": b}
    _, h, c = nn.lstm_forward(p, [[x]], np.array([h0]), np.array([c0]))
    assert h[0] == pytest.approx(h1, abs=1e-14)
    assert c[0] == pytest.approx(c1, abs=1e-14)


def test_lstm_fixed_point_contraction():
    p = {"Wx": np.array([[0.5], [0.3], [0.8], [0.4]]), "Wh": np.array([[0.2], [0.1], [0.3], [0.2]]),
         "b": np.zeros(4)}
    hs, _, _ = nn.lstm_forward(p, np.full((40, 1), 0.7))
    steps = np.abs(np.diff(hs[:, 0]))
    assert steps[-1] < 1e-6
    assert np.all(steps[5:][1:] <= steps[5:][:-1] + 1e-15)


def test_lstm_batch_matches_single(rng):
    p = {"Wx": rng.normal(size=(12, 2)), "Wh": rng.normal(size=(12, 3)), "b": rng.normal(size=12)}
    seqs = rng.normal(size=(4, 6, 2))
    batch, _, _ = nn.lstm_forward(p, seqs)
    for i in range(4):
        np.testing.assert_allclose(nn.lstm_forward(p, seqs[i])[0], batch[i], atol=1e-14)


def test_reparameterize():
    d = nn.LatentDist([0.3, -1.0], [0.2, 0.5])
    assert nn.reparameterize(d, [0.0, 0.0]).tolist() == [0.3, -1.0]
    collapsed = nn.LatentDist([0.3], [-200.0])
    assert nn.reparameterize(collapsed, [5.0])[0] == pytest.approx(0.3, abs=1e-20)
    assert nn.reparameterize(nn.LatentDist([0.0], [0.0]), [1.5]).tolist() == [1.5]


def test_elbo_examples():
    x = np.array([0.3, -1.2, 2.0])
    assert nn.elbo_loss(x, x, nn.LatentDist([0.0], [0.0]))[1] == 0.0
    total, kl, nll = nn.elbo_loss(x, x, nn.LatentDist([1.0], [0.0]))
    assert kl == pytest.approx(0.5, abs=1e-12)
    assert nll == pytest.approx(3 * 0.5 * LOG_2PI, abs=1e-12)
    assert total == kl + nll


# magnitudes below 1e-100 would underflow mu * mu, so they are not generated
_latent = st.floats(-5, 5).filter(lambda v: v == 0 or abs(v) > 1e-100)


@given(arrays(np.float64, 3, elements=_latent), arrays(np.float64, 3, elements=_latent))
def test_kl_non_negative(mu, logvar):
    kl = float(nn.kl_terms(mu, logvar))
    assert kl >= 0.0
    if kl == 0.0:
        assert np.all(mu == 0) and np.all(np.abs(logvar) < 1e-7)


def test_grad_constant_and_quadratic(rng):
    params = {"W": rng.normal(size=(2, 2))}
    assert np.all(nn.grad(lambda p: (3.0, {"W": np.zeros((2, 2))}), params)["W"] == 0)
    x, y = np.array([1.0, -2.0]), np.array([0.5, 0.25])

    def quad(p):
        r = p["W"] @ x - y
        return 0.5 * float(r @ r), {"W": np.outer(r, x)}

    np.testing.assert_allclose(nn.grad(quad, params)["W"], np.outer(params["W"] @ x - y, x))
    assert nn.grad_check(quad, params) < 1e-8


def test_grad_rejects_nonfinite():
    with pytest.raises(NonFiniteLoss):
        nn.grad(lambda p: (float("nan"), {"w": np.zeros(1)}), {"w": np.zeros(1)})


def test_grad_check_linear_and_sign_flip(rng):
    c = rng.uniform(1, 2, size=5) * rng.choice([-1, 1], size=5)
    params = {"w": rng.normal(size=5)}
    assert nn.grad_check(lambda p: (float(p["w"] @ c), {"w": c.copy()}), params) < 1e-10
    assert nn.grad_check(lambda p: (float(p["w"] @ c), {"w": -c}), params) == pytest.approx(2.0, abs=1e-6)


def test_dense_backward_by_finite_differences(rng):
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))
    for act in ("identity", "sigmoid", "relu"):
        def loss(p, act=act):
            y, cache = nn.dense_fwd(p["W"], p["b"], x, act)
            r = y - target
            _, dW, db = nn.dense_bwd(r, cache)
            return 0.5 * float((r * r).sum()), {"W": dW, "b": db}

        assert nn.grad_check(loss, {"W": rng.normal(size=(2, 3)), "b": rng.normal(size=2)}) < 1e-6


def test_composite_small_network():
    loss_fn, params = random_network(7)
    assert nn.grad_check(loss_fn, params) < 1e-4


def test_adam_zero_grad_and_lr_zero(rng):
    params = {"w": rng.normal(size=3)}
    zeros = {"w": np.zeros(3)}
    out, state = nn.adam_step(params, zeros, nn.AdamState.fresh(params), 1e-3)
    np.testing.assert_array_equal(out["w"], params["w"])
    out, _ = nn.adam_step(params, {"w": rng.normal(size=3)}, nn.AdamState.fresh(params), 0.0)
    np.testing.assert_array_equal(out["w"], params["w"])
    assert state.step == 1


@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]))
def test_adam_first_step_magnitude(g, sign):
    params = {"w": np.array([2.0])}
    out, _ = nn.adam_step(params, {"w": np.array([sign * g])}, nn.AdamState.fresh(params), 0.01)
    step = params["w"][0] - out["w"][0]
    assert step == pytest.approx(sign * 0.01, rel=1e-4)


def test_adam_descends_quadratic():
    params = {"w": np.array([3.0])}
    state = nn.AdamState.fresh(params)
    losses = []
    for _ in range(3):
        losses.append(0.5 * params["w"][0] ** 2)
        params, state = nn.adam_step(params, {"w": params["w"].copy()}, state, 0.1)
    assert losses[2] < losses[1] < losses[0]


def test_dropout_mask_inverted(rng):
    m = nn.dropout_mask(rng, (20000,), 0.2)
    assert set(np.unique(m)) <= {0.0, 1.25}
    assert m.mean() == pytest.approx(1.0, abs=0.03)
    assert np.all(nn.dropout_mask(rng, (3,), 0.0) == 1.0)


def test_params_roundtrip(tmp_path, rng):
    params = {"a.W": rng.normal(size=(3, 2)), "a.b": rng.normal(size=3)}
    nn.save_params(tmp_path / "p.json", params, {"note": "x"})
    back, meta = nn.load_params(tmp_path / "p.json")
    assert meta["note"] == "x"
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
