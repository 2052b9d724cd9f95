import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridflow import predictor as pr
from hybridflow.gradtensor import Tape, Tensor, grad_check

HAND_NLL = 1.1931471805599453  # 0.5 + 0.5 * log 4


def test_gaussian_nll_hand_cases():
    assert float(pr.gaussian_nll_loss(Tensor([[1.0]]), Tensor([[0.0]]), Tensor([[1.0]])).data) == 0.0
    assert float(pr.gaussian_nll_loss(Tensor([[0.0]]), Tensor([[0.0]]), Tensor([[1.0]])).data) == pytest.approx(0.5, abs=1e-9)
    v = float(pr.gaussian_nll_loss(Tensor([[0.0]]), Tensor([[np.log(4.0)]]), Tensor([[2.0]])).data)
    assert v == pytest.approx(HAND_NLL, abs=1e-9)


def test_beta_nll_hand_case_and_reduction():
    v = float(pr.beta_nll_loss(Tensor([[0.0]]), Tensor([[np.log(4.0)]]), Tensor([[2.0]]), beta=1.0).data)
    assert v == pytest.approx(4 * HAND_NLL, abs=1e-9)
    rng = np.random.default_rng(0)
    for _ in range(100):
        mu, lv, y = (Tensor(rng.normal(size=(7, 2))) for _ in range(3))
        a = float(pr.beta_nll_loss(mu, lv, y, beta=0.0).data)
        b = float(pr.gaussian_nll_loss(mu, lv, y).data)
        assert abs(a - b) <= 1e-12


def test_beta_nll_gradient_scaling():
    lv, y = Tensor([[np.log(4.0)]]), Tensor([[2.0]])

    def grad_mu(beta):
        mu = Tensor([[0.0]], requires_grad=True)
        with Tape() as tape:
            loss = pr.beta_nll_loss(mu, lv, y, beta)
        return tape.backward(loss, [mu])[mu.node_id][0, 0]

    assert grad_mu(0.5) == pytest.approx(2.0 * grad_mu(0.0), rel=1e-12)
    # finite differences of the loss value agree with the detached-weight gradient
    f = lambda m: pr.beta_nll_loss(m, lv, y, 0.5)  # noqa: E731
    assert grad_check(f, np.array([[0.0]])) <= 1e-6


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0])
def test_loss_gradients(beta):
    rng = np.random.default_rng(1)
    y = rng.normal(size=(5, 2))
    for _ in range(10):
        mu, lv = rng.normal(size=(5, 2)), rng.normal(scale=0.5, size=(5, 2))
        assert grad_check(lambda m: pr.gaussian_nll_loss(m, lv, y), mu) <= 1e-4
        assert grad_check(lambda v: pr.gaussian_nll_loss(mu, v, y), lv) <= 1e-4
        # the detached weight makes the logvar gradient differ from finite differences
        # unless beta is 0, so only the mean is checked for beta > 0
        assert grad_check(lambda m: pr.beta_nll_loss(m, lv, y, beta), mu) <= 1e-4


def test_nll_minimised_at_residual_squared():
    grid = np.linspace(-3, 3, 6001)
    vals = [float(pr.gaussian_nll_loss(Tensor([[0.0]]), Tensor([[g]]), Tensor([[1.5]])).data) for g in grid]
    assert grid[int(np.argmin(vals))] == pytest.approx(np.log(1.5**2), abs=1e-3)


def test_mlp_gradients():
    model = pr.build_predictor(3, 2, head="heteroscedastic", dropout=0.0, seed=0)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
    for name in ("W0", "b0", "W1", "b1"):
        base = model.params[name].data.copy()

        def f(w, name=name):
            model.params[name] = w
            mu, lv = pr.predictor_forward(model, x)
            return pr.gaussian_nll_loss(mu, lv, y)

        checked = 0
        while checked < 10:
            point = base + rng.normal(scale=0.1, size=base.shape)
            f(Tensor(point))
            pre = x @ model.params["W0"].data.T + model.params["b0"].data
            if np.abs(pre).min() < 1e-3:
                continue  # relu kink within reach of the finite difference
            assert grad_check(f, point) <= 1e-4
            checked += 1
        model.params[name] = Tensor(base, requires_grad=True)


def test_heads_and_validation():
    model = pr.build_predictor(4, 3, head="heteroscedastic")
    mu, lv = pr.predictor_forward(model, np.zeros((2, 4)))
    assert mu.shape == (2, 3) and lv.shape == (2, 3)
    assert pr.predictor_forward(pr.build_predictor(4, 1), np.zeros((2, 4)))[1] is None
    with pytest.raises(ValueError):
        pr.build_predictor(2, dropout=1.0)
    with pytest.raises(ValueError):
        pr.TrainConfig(beta=1.5)
    with pytest.raises(ValueError, match="predictor_forward"):
        pr.predictor_forward(model, np.zeros((2, 5)))


def test_point_head_learns_linear_map():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(500, 1))
    y = 2 * x
    model = pr.build_predictor(1, 1, dropout=0.0, seed=0)
    best, lr, hist = pr.train_predictor(model, x, y, pr.TrainConfig(lr_grid=(1e-2, 1e-3), epochs=500, seed=0))
    assert hist[lr]["best_val"][0] < 1e-3


def test_training_deterministic_and_grid_selection():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(200, 2))
    y = x[:, :1] - x[:, 1:] + 0.1 * rng.normal(size=(200, 1))
    cfg = pr.TrainConfig(epochs=30, lr_grid=(1e-2, 1e-4), seed=3)
    runs = [pr.train_predictor(pr.build_predictor(2, seed=1), x, y, cfg) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    assert runs[0][2] == runs[1][2]
    scores = {lr: h["best_val"][0] for lr, h in runs[0][2].items()}
    assert runs[0][1] == min(scores, key=scores.get)


def test_all_diverging_grid_raises():
    x = np.ones((20, 1))
    y = np.full((20, 1), np.inf)
    with pytest.raises(FloatingPointError, match="every learning rate"):
        pr.train_predictor(pr.build_predictor(1), x, y, pr.TrainConfig(epochs=2))


def test_heteroscedastic_head_recovers_noise():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, size=(4000, 1))
    sd = 0.1 + 0.4 * x**2
    y = np.sin(2 * x) + sd * rng.normal(size=x.shape)
    model = pr.build_predictor(1, 1, head="heteroscedastic", dropout=0.0, seed=0)
    best, _, _ = pr.train_predictor(model, x, y, pr.TrainConfig(loss="gaussian_nll", lr_grid=(1e-3,), seed=0))
    grid = np.linspace(-0.9, 0.9, 7)[:, None]
    var = np.exp(pr.predictor_forward(best, grid)[1].data[:, 0])
    true = (0.1 + 0.4 * grid[:, 0] ** 2) ** 2
    assert np.max(np.abs(var - true) / true) <= 0.3


class FixedMask:
    """Dropout test double: keeps every unit."""

    def random(self, shape):
        return np.zeros(shape)


def test_mc_dropout_degenerate_cases():
    x = np.random.default_rng(0).normal(size=(5, 3))
    model = pr.build_predictor(3, dropout=0.0)
    mean, var = pr.mc_dropout_predict(model, x, passes=10)
    assert np.all(var == 0)
    model = pr.build_predictor(3, dropout=0.3)
    mean, var = pr.mc_dropout_predict(model, x, passes=2, seed=FixedMask())
    assert np.all(var == 0)
    with pytest.raises(ValueError, match="passes"):
        pr.mc_dropout_predict(model, x, passes=1)


def test_mc_dropout_convergence_and_determinism():
    rng = np.random.default_rng(6)
    model = pr.build_predictor(3, dropout=0.2, seed=2)
    x = rng.normal(size=(20, 3))
    m30, v30 = pr.mc_dropout_predict(model, x, 30, seed=0)
    m3000, v3000 = pr.mc_dropout_predict(model, x, 3000, seed=1)
    assert np.all(np.abs(m30 - m3000) <= 3 * np.sqrt(v3000 / 30))
    np.testing.assert_array_equal(pr.mc_dropout_predict(model, x, 30, seed=0)[0], m30)


def test_mc_dropout_order_invariance():
    model = pr.build_predictor(2, dropout=0.2, seed=4)
    x = np.random.default_rng(7).normal(size=(4, 2))
    mus, _ = pr._mc_passes(model, x, 12, 0)
    perm = np.random.default_rng(1).permutation(12)
    np.testing.assert_allclose(mus.var(axis=0, ddof=1), mus[perm].var(axis=0, ddof=1), rtol=1e-12)


def test_ensemble_predict_hand_cases():
    a = pr.build_predictor(1, head="heteroscedastic", hidden=(2,))
    b = pr.build_predictor(1, head="heteroscedastic", hidden=(2,))
    for m, mean, var in ((a, 1.0, 1.0), (b, 3.0, 3.0)):
        m.params["W1"].data[:] = 0
        m.params["b1"].data = np.array([mean, np.log(var)])
    mean, epi, ale = pr.ensemble_predict(pr.EnsembleModel([a, b]), np.zeros((1, 1)))
    assert mean[0, 0] == 2.0 and epi[0, 0] == 1.0 and ale[0, 0] == pytest.approx(2.0)
    same = pr.EnsembleModel([a, a])
    assert pr.ensemble_predict(same, np.ones((3, 1)))[1].max() == 0
    with pytest.raises(ValueError):
        pr.EnsembleModel([a])
    with pytest.raises(ValueError, match="output dim"):
        pr.ensemble_predict(pr.EnsembleModel([a, pr.build_predictor(1, 2)]), np.zeros((1, 1)))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.floats(0.0, 0.9))
def test_forward_shapes_property(d_in, d_out, rate):
    model = pr.build_predictor(d_in, d_out, head="heteroscedastic", dropout=rate)
    mu, lv = pr.predictor_forward(model, np.zeros((3, d_in)), np.random.default_rng(0))
    assert mu.shape == lv.shape == (3, d_out)
    assert np.all(np.exp(lv.data) > 0)
