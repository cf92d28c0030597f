"""Approximators: backprop against finite differences, Adam and least-squares
against closed forms, lossless persistence."""
import numpy as np
import pytest

from residual_rl.errors import ConfigError, NanGradientError, SingularDesignError
from residual_rl.nets import (
    AdamState,
    LinearModel,
    MLP,
    adam_step,
    fit_linear,
    fit_mlp,
    load_model,
    mlp_forward,
    mlp_init,
    mse_loss_grad,
    save_model,
)


def test_forward_hand_computed():
    # one hidden layer relu: x=2 -> pre=[2,-1] -> relu=[2,0] -> out=2*1+0.5
    net = MLP([np.array([[1.0, -1.0]]), np.array([[1.0], [2.0]])],
              [np.array([0.0, 1.0]), np.array([0.5])])
    assert mlp_forward(net, np.array([2.0]))[0] == pytest.approx(2.5, abs=1e-15)
    batch = mlp_forward(net, np.array([[2.0], [0.0]]))
    assert batch.shape == (2, 1)
    assert batch[1, 0] == pytest.approx(0.0 * 1.0 + 1.0 * 2.0 + 0.5, abs=1e-15)  # relu([0,1])=[0,1]


def test_forward_degenerate_nets():
    zero = MLP([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    assert np.array_equal(mlp_forward(zero, np.ones((5, 3))), np.zeros((5, 2)))
    ident = MLP([np.eye(3)], [np.zeros(3)])
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(mlp_forward(ident, x), x)


def test_forward_matches_straight_loop():
    net = mlp_init([4, 7, 5, 2], rng=42)
    x = np.random.default_rng(1).normal(size=(6, 4))

    def reference(row):
        h = row
        for k, (w, b) in enumerate(zip(net.weights, net.biases)):
            pre = np.array([sum(h[i] * w[i, j] for i in range(w.shape[0])) + b[j]
                            for j in range(w.shape[1])])
            h = np.maximum(pre, 0.0) if k < len(net.weights) - 1 else pre
        return h

    got = mlp_forward(net, x)
    for r in range(6):
        assert np.allclose(got[r], reference(x[r]), atol=1e-12)


def test_init_bounds_and_determinism():
    net1 = mlp_init([3, 16, 2], rng=7)
    net2 = mlp_init([3, 16, 2], rng=7)
    net3 = mlp_init([3, 16, 2], rng=8)
    for w, fan_in in zip(net1.weights, [3, 16]):
        assert np.all(np.abs(w) <= np.sqrt(1.0 / fan_in))
    assert all(np.array_equal(a, b) for a, b in zip(net1.params(), net2.params()))
    assert not np.array_equal(net1.weights[0], net3.weights[0])
    with pytest.raises(ConfigError):
        mlp_init([4], rng=0)


def _numeric_grads(net, x, t, h=1e-5):
    """Central finite differences through the loss, one parameter at a time."""
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            keep = p[ix]
            p[ix] = keep + h
            up, _, _ = mse_loss_grad(net, x, t)
            p[ix] = keep - h
            dn, _, _ = mse_loss_grad(net, x, t)
            p[ix] = keep
            g[ix] = (up - dn) / (2.0 * h)
            it.iternext()
        grads.append(g)
    return grads


def _grad_relerr(analytic, numeric):
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = np.maximum(np.abs(gn), 1e-8)
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for trial in range(5):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 6))] + \
                [int(rng.integers(2, 9)) for _ in range(depth)] + \
                [int(rng.integers(1, 4))]
        net = mlp_init(sizes, rng=int(rng.integers(1 << 30)))
        batch = int(rng.integers(1, 9))
        x = rng.normal(size=(batch, sizes[0]))
        t = rng.normal(size=(batch, sizes[-1]))
        _, gw, gb = mse_loss_grad(net, x, t)
        numeric = _numeric_grads(net, x, t)
        assert _grad_relerr(gw + gb, numeric) <= 1e-4


def test_loss_value_hand_computed():
    # zero-weight net predicts the bias; batch mse of squared-error sums
    net = MLP([np.zeros((1, 1))], [np.array([1.0])])
    x = np.array([[0.0], [0.0]])
    t = np.array([[0.0], [3.0]])
    loss, _, _ = mse_loss_grad(net, x, t)
    assert loss == pytest.approx((1.0 + 4.0) / 2.0, abs=1e-15)


def test_adam_first_step_is_signed_lr():
    # bias correction makes step one exactly lr*g/(|g|+eps)
    p = np.array([1.0, -2.0])
    g = np.array([3.0, -0.5])
    state = AdamState.for_params([p], lr=0.1)
    adam_step(state, [p], [g])
    expect = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, expect, atol=1e-12)
    assert state.t == 1


def test_adam_two_steps_match_reference_formula():
    p = np.array([0.5])
    state = AdamState.for_params([p], lr=0.01)
    m = v = 0.0
    ref = 0.5
    for t, g in enumerate((2.0, -1.0), start=1):
        adam_step(state, [p], [np.array([g])])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p[0] == pytest.approx(ref, abs=1e-14)


def test_gradient_zero_at_perfect_fit_and_scalar_hand_value():
    # targets equal outputs -> zero gradient everywhere
    net = mlp_init([2, 5, 1], rng=3)
    x = np.random.default_rng(4).normal(size=(6, 2))
    t = mlp_forward(net, x)
    loss, gw, gb = mse_loss_grad(net, x, t)
    assert loss == 0.0
    assert all(np.allclose(g, 0.0, atol=1e-15) for g in gw + gb)
    # y = w*x, one sample (x=1, t=0), w=3: dL/dw = 2*w*x^2 = 6
    scalar = MLP([np.array([[3.0]])], [np.array([0.0])])
    _, gw, _ = mse_loss_grad(scalar, np.array([[1.0]]), np.array([[0.0]]))
    assert gw[0][0, 0] == pytest.approx(6.0, abs=1e-15)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.5, -0.5])
    state = AdamState.for_params([p], lr=0.1)
    adam_step(state, [p], [np.zeros(2)])
    assert np.array_equal(p, np.array([1.5, -0.5]))
    assert state.t == 1


def test_adam_step_magnitude_approaches_lr_under_constant_gradient():
    p = np.array([0.0])
    lr = 0.05
    state = AdamState.for_params([p], lr=lr)
    g = [np.array([0.37])]
    last = p.copy()
    for _ in range(5000):
        last = p.copy()
        adam_step(state, [p], g)
    # bias corrections vanish and m/sqrt(v) -> 1, so |step| -> lr
    assert abs(abs(p[0] - last[0]) - lr) < 1e-6


def test_adam_rejects_nonfinite_gradients():
    p = np.array([0.0])
    state = AdamState.for_params([p], lr=0.1)
    with pytest.raises(NanGradientError):
        adam_step(state, [p], [np.array([np.inf])])


def test_fit_linear_matches_lstsq():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 4))
    y = rng.normal(size=(60, 2))
    model = fit_linear(x, y, fit_intercept=False)
    ref, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert np.allclose(model.W, ref, atol=1e-10)
    assert np.allclose(model.b, 0.0)


def test_fit_linear_recovers_affine_map_exactly():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 3))
    w_true = np.array([[1.5], [-2.0], [0.25]])
    y = x @ w_true + 0.75
    model = fit_linear(x, y, fit_intercept=True)
    assert np.allclose(model.W, w_true, atol=1e-10)
    assert model.b[0] == pytest.approx(0.75, abs=1e-10)
    pred = model.predict(np.array([1.0, 1.0, 1.0]))
    assert pred[0] == pytest.approx(1.5 - 2.0 + 0.25 + 0.75, abs=1e-10)


def test_fit_linear_ridge_matches_closed_form():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 3))
    y = rng.normal(size=(30, 1))
    lam = 0.7
    model = fit_linear(x, y, ridge=lam, fit_intercept=False)
    ref = np.linalg.solve(x.T @ x + lam * np.eye(3), x.T @ y)
    assert np.allclose(model.W, ref, atol=1e-12)


def test_fit_linear_trivial_cases():
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    model = fit_linear(x, 2.0 * x + 1.0, fit_intercept=True)
    assert model.W[0, 0] == pytest.approx(2.0, abs=1e-12)
    assert model.b[0] == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(model.predict(x) - (2.0 * x + 1.0))) < 1e-12
    flat = fit_linear(np.array([[0.0], [1.0]]), np.zeros((2, 1)), fit_intercept=True)
    assert abs(flat.W[0, 0]) < 1e-14 and abs(flat.b[0]) < 1e-14


def test_fit_linear_flags_singular_design():
    x = np.ones((10, 2))          # duplicate columns
    y = np.ones((10, 1))
    with pytest.raises(SingularDesignError):
        fit_linear(x, y, fit_intercept=False)
    model = fit_linear(x, y, ridge=1e-3, fit_intercept=False)  # ridge rescues
    assert np.all(np.isfinite(model.W))


def test_fit_mlp_is_deterministic_and_learns():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, size=(256, 2))
    y = (x[:, :1] * 0.5 - x[:, 1:] * 0.25) + 0.1
    net1, losses1 = fit_mlp(x, y, hidden=(16,), seed=5, epochs=60, lr=1e-2)
    net2, losses2 = fit_mlp(x, y, hidden=(16,), seed=5, epochs=60, lr=1e-2)
    assert all(np.array_equal(a, b) for a, b in zip(net1.params(), net2.params()))
    assert np.array_equal(losses1, losses2)
    assert losses1[-1] < 0.05 * losses1[0]


def test_fit_mlp_zero_epochs_returns_seeded_init():
    x = np.zeros((8, 2))
    y = np.zeros((8, 1))
    net, losses = fit_mlp(x, y, hidden=(6,), seed=9, epochs=0)
    assert losses.shape == (0,)
    init = mlp_init([2, 6, 1], np.random.default_rng(9))
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), init.params()))


def test_fit_mlp_learns_identity_to_1e3():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1.0, 1.0, size=(512, 1))
    net, losses = fit_mlp(x, x, hidden=(64,), seed=1, epochs=120, lr=3e-3)
    assert losses[-1] < 1e-3


def test_model_json_round_trip_is_bit_exact(tmp_path):
    net = mlp_init([3, 8, 2], rng=11)
    p = str(tmp_path / "net.json")
    save_model(net, p, metadata={"note": "round trip"})
    back, meta = load_model(p)
    assert meta["note"] == "round trip"
    assert back.layer_sizes == net.layer_sizes
    for a, b in zip(net.params(), back.params()):
        assert np.array_equal(a, b)

    lin = LinearModel(W=np.array([[0.1], [0.2]]), b=np.array([0.3]))
    p2 = str(tmp_path / "lin.json")
    save_model(lin, p2)
    back2, _ = load_model(p2)
    assert np.array_equal(back2.W, lin.W)
    assert np.array_equal(back2.b, lin.b)


def test_save_then_save_is_deterministic(tmp_path):
    net = mlp_init([2, 4, 1], rng=0)
    p1, p2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    save_model(net, p1)
    save_model(net, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
