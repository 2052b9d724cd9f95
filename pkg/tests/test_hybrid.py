import dataclasses

import numpy as np
import pytest

from hybridflow import checkpoint as ckpt
from hybridflow import data as hd
from hybridflow import hybrid as hy
from hybridflow import metrics
from hybridflow import predictor as pr

FAST = dict(flow_layers=2, flow_epochs=40, epochs=60, lr_grid=(1e-2, 1e-3), mc_passes=10, flow_samples=20)


def _prepared(ds, seed=0):
    tr, te = hd.split(ds, 0.2, seed)
    norm = hd.normalize_fit(tr)
    return hd.normalize_apply(norm, tr), hd.normalize_apply(norm, te), tr, te, norm


def _linear(n=600, seed=0, d_in=2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d_in))
    y = 2 * X[:, 0] + 0.1 * rng.normal(size=n)
    return hd.Dataset("lin", X, y)


@pytest.fixture(scope="module")
def linear_model():
    ntr, nte, tr, te, norm = _prepared(_linear())
    return hy.fit_hybrid(ntr, hy.HybridConfig(**FAST), norm), ntr, nte, te, norm


def test_feature_concat():
    np.testing.assert_array_equal(hy.feature_concat([[1.0, 2.0]], [[9.0]]), [[1.0, 2.0, 9.0]])
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(hy.feature_concat(x, np.zeros((3, 0))), x)
    z = np.arange(3.0)[:, None]
    f = hy.feature_concat(x, z)
    np.testing.assert_array_equal(f[:, :2], x)
    np.testing.assert_array_equal(f[:, 2:], z)
    with pytest.raises(ValueError, match="batch"):
        hy.feature_concat(x, np.zeros((2, 1)))


def test_select_features_modes():
    x, z = np.ones((4, 3)), np.zeros((4, 1))
    assert hy.select_features(x, z, "x_and_z").shape == (4, 4)
    assert hy.select_features(x, z, "x_only").shape == (4, 3)
    assert hy.select_features(x, z, "z_only").shape == (4, 1)
    with pytest.raises(ValueError):
        hy.select_features(x, z, "both")


def test_predictor_input_dim(linear_model):
    model = linear_model[0]
    assert model.predictor.input_dim == model.feature_dim == 2 + 1


def test_report_additivity_and_units(linear_model):
    model, _, nte, te, norm = linear_model
    rep = hy.predict_with_uncertainty(model, nte, seed=1)
    np.testing.assert_array_equal(rep.total - (rep.aleatoric + rep.epistemic), 0.0)
    assert np.all(rep.aleatoric >= 0) and np.all(rep.epistemic >= 0)
    assert metrics.rmse(rep.mean, te.Y) < 0.3


def test_denormalisation_consistency(linear_model):
    model, _, nte, _, norm = linear_model
    raw = dataclasses.replace(model, normalizer=None)
    a = hy.predict_with_uncertainty(model, nte, seed=4)
    b = hy.predict_with_uncertainty(raw, nte.X, seed=4)
    np.testing.assert_allclose(a.mean, hd.denormalize_targets(norm, b.mean), rtol=0, atol=1e-8)
    np.testing.assert_allclose(a.aleatoric, b.aleatoric * norm.target_std**2, rtol=0, atol=1e-8)
    np.testing.assert_allclose(a.epistemic, b.epistemic * norm.target_std**2, rtol=0, atol=1e-8)


def test_rejects_foreign_normalizer(linear_model):
    model, _, _, te, _ = linear_model
    other = hd.normalize_fit(hd.split(te, 0.5, 0)[0])
    with pytest.raises(ValueError, match="normaliz"):
        hy.predict_with_uncertainty(model, hd.normalize_apply(other, te))
    with pytest.raises(ValueError, match="normaliz"):
        hy.predict_with_uncertainty(model, te)
    with pytest.raises(ValueError, match="shape"):
        hy.predict_with_uncertainty(model, np.zeros((2, 5)))


def test_zero_dropout_has_no_epistemic(linear_model):
    _, ntr, nte, _, norm = linear_model
    model = hy.fit_hybrid(ntr, hy.HybridConfig(**{**FAST, "dropout": 0.0}), norm)
    rep = hy.predict_with_uncertainty(model, nte)
    assert np.all(rep.epistemic == 0)
    np.testing.assert_array_equal(rep.total, rep.aleatoric)


def test_matches_x_only_mlp_on_linear_task(linear_model):
    model, ntr, nte, te, norm = linear_model
    hybrid_rmse = metrics.rmse(hy.predict_with_uncertainty(model, nte).mean, te.Y)
    mlp = pr.build_predictor(2, 1, dropout=0.2, seed=0)
    cfg = hy.HybridConfig(**FAST).predictor_train_config()
    mlp, _, _ = pr.train_predictor(mlp, ntr.X, ntr.Y, cfg)
    mlp_rmse = metrics.rmse(hd.denormalize_targets(norm, pr.mc_dropout_predict(mlp, nte.X, 10)[0]), te.Y)
    assert hybrid_rmse <= 1.1 * mlp_rmse


def test_same_seed_same_checkpoint_and_seed_isolation(linear_model):
    _, ntr, _, _, norm = linear_model
    cfg = hy.HybridConfig(**{**FAST, "flow_epochs": 5, "epochs": 5})
    a = hy.fit_hybrid(ntr, cfg, norm)
    b = hy.fit_hybrid(ntr, cfg, norm)
    assert ckpt.checkpoint_digest(a) == ckpt.checkpoint_digest(b)
    c = hy.fit_hybrid(ntr, dataclasses.replace(cfg, predictor_seed=7), norm)
    assert ckpt.checkpoint_digest(c, "flow") == ckpt.checkpoint_digest(a, "flow")
    assert ckpt.checkpoint_digest(c, "predictor") != ckpt.checkpoint_digest(a, "predictor")
    d = hy.fit_hybrid(ntr, dataclasses.replace(cfg, flow_seed=7), norm)
    assert ckpt.checkpoint_digest(d, "flow") != ckpt.checkpoint_digest(a, "flow")


def test_input_ablation_modes_share_flow(linear_model):
    model, ntr, nte, _, norm = linear_model
    dims = {}
    for mode in hy.INPUT_MODES:
        m, rep = hy.input_ablation(ntr, nte, mode, hy.HybridConfig(**{**FAST, "epochs": 5}), norm, flow=model.flow)
        assert m.flow is model.flow
        dims[mode] = m.predictor.input_dim
        assert rep.mean.shape == (nte.n, 1)
    assert dims == {"x_and_z": 3, "x_only": 2, "z_only": 1}


def test_z_only_on_independent_target_predicts_marginal():
    rng = np.random.default_rng(3)
    ds = hd.Dataset("indep", rng.normal(size=(800, 2)), 5 + 2 * rng.normal(size=800))
    ntr, nte, tr, te, norm = _prepared(ds)
    _, rep = hy.input_ablation(ntr, nte, "z_only", hy.HybridConfig(**FAST), norm)
    # at inference z = mu_z(x), which carries no information about y
    assert metrics.rmse(rep.mean, te.Y) == pytest.approx(te.Y.std(), rel=0.15)


def test_ensemble_epistemic_option(linear_model):
    _, ntr, nte, _, norm = linear_model
    cfg = hy.HybridConfig(**{**FAST, "epistemic": "ensemble", "ensemble_members": 3, "epochs": 10})
    model = hy.fit_hybrid(ntr, cfg, norm)
    assert isinstance(model.predictor, pr.EnsembleModel)
    rep = hy.predict_with_uncertainty(model, nte)
    assert np.all(rep.epistemic > 0)


def test_finetune_flag_moves_flow(linear_model):
    _, ntr, _, _, norm = linear_model
    base = hy.HybridConfig(**{**FAST, "flow_epochs": 5, "epochs": 5})
    off = hy.fit_hybrid(ntr, base, norm)
    on = hy.fit_hybrid(ntr, dataclasses.replace(base, finetune_flow=True), norm)
    assert "finetune_seconds" in on.timings
    assert ckpt.checkpoint_digest(on, "flow") != ckpt.checkpoint_digest(off, "flow")
    with pytest.raises(ValueError, match="fine-tuning"):
        hy.HybridConfig(finetune_flow=True, epistemic="ensemble")
