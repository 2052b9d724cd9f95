import dataclasses
import random

import numpy as np
import pytest

from hybridflow import runner
from hybridflow.records import ResultRecord

TINY = dict(
    repeats=3,
    epochs=4,
    lr_grid=[1e-3],
    flow_layers=2,
    mc_passes=5,
    flow_samples=10,
    ensemble_members=2,
    synthetic_n=150,
)


def _cfg(**kw):
    return runner.ExperimentConfig(**{"datasets": ["synth_heteroscedastic"], **TINY, **kw})


@pytest.fixture(scope="module")
def sweep():
    cfg = _cfg(methods=["mlp_no_uq", "hybridflow"])
    return cfg, runner.run_experiment(cfg)


def _rec(rmse, seed, method="nll", dataset="d"):
    return ResultRecord(dataset, method, seed, "h", rmse=rmse)


def test_sweep_shape(sweep):
    cfg, records = sweep
    assert len(records) == 6 and all(r.ok for r in records)
    assert {(r.method, r.seed) for r in records} == {(m, s) for m in cfg.methods for s in (0, 1, 2)}
    for r in records:
        if r.method == "mlp_no_uq":
            assert r.metrics is None and r.samples is None
        else:
            assert set(r.metrics) == {"aleatoric", "epistemic", "total"}
            assert len(r.samples["aleatoric"]) == 30


def test_every_method_runs():
    records = runner.run_experiment(_cfg(methods=list(runner.METHODS), repeats=1))
    assert [r.method for r in records] == list(runner.METHODS)
    assert all(r.ok for r in records), [r.error for r in records]


def test_aggregate_hand_case():
    rows = runner.aggregate([_rec(1.0, 0), _rec(3.0, 1)])
    assert rows[0]["rmse_mean"] == 2.0
    assert rows[0]["rmse_std"] == pytest.approx(np.sqrt(2), abs=1e-12)
    single = runner.aggregate([_rec(1.0, 0)])[0]
    assert single["rmse_mean"] == 1.0 and single["rmse_std"] is None


def test_aggregate_excludes_failures_and_is_order_free():
    recs = [_rec(float(i), i, m) for i in range(6) for m in ("a", "b")]
    recs.append(ResultRecord("d", "a", 99, "h", status="failed", error="boom"))
    base = runner.aggregate(recs)
    assert {r["method"]: r["n_failed"] for r in base} == {"a": 1, "b": 0}
    for s in range(5):
        random.Random(s).shuffle(recs)
        assert runner.aggregate(recs) == base


def test_disentanglement_pooling_and_flag():
    a = ResultRecord("d", "m", 0, "h", samples={"aleatoric": [1.0, 2.0, 3.0], "epistemic": [2.0, 4.0, 6.0]})
    row = runner.disentanglement_report([a])[0]
    assert row["spearman"] == pytest.approx(1.0) and row["pearson"] == pytest.approx(1.0) and not row["flagged"]
    flat = ResultRecord("d", "m", 0, "h", samples={"aleatoric": [1.0, 1.0, 1.0], "epistemic": [1.0, 2.0, 3.0]})
    assert runner.disentanglement_report([flat])[0]["flagged"]


def test_emit_is_reproducible_and_round_trips(sweep, tmp_path):
    cfg, records = sweep
    runner.emit_report(records, tmp_path / "a", cfg)
    runner.emit_report(records, tmp_path / "b", cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(list((tmp_path / "a" / "records").glob("*.json"))) == 6
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    back = runner.load_records(tmp_path / "a")
    assert runner.aggregate(back) == runner.aggregate(records)
    assert runner.disentanglement_report(back) == runner.disentanglement_report(records)


def test_rerun_gives_identical_records(sweep):
    cfg, records = sweep
    again = runner.run_experiment(cfg)
    assert [r.to_json() for r in again] == [r.to_json() for r in records]


def test_failing_cell_is_isolated(monkeypatch):
    real = runner._fit_predict

    def flaky(method, cfg, train, test, norm, seed, **kw):
        if seed == 1:
            raise FloatingPointError("diverged")
        return real(method, cfg, train, test, norm, seed, **kw)

    monkeypatch.setattr(runner, "_fit_predict", flaky)
    records = runner.run_experiment(_cfg(methods=["nll"]))
    assert [r.ok for r in records] == [True, False, True]
    assert "diverged" in records[1].error
    assert runner.aggregate(records)[0]["n"] == 2


def test_config_hash_tracks_every_knob():
    base = _cfg()
    seen = {base.config_hash}
    for name, value in [("dropout", 0.1), ("flow_layers", 3), ("epochs", 5), ("lr_grid", [1e-2]), ("mc_passes", 6), ("seeds", [5, 6, 7])]:
        h = dataclasses.replace(base, **{name: value}).config_hash
        assert h not in seen, name
        seen.add(h)
    assert _cfg().config_hash == base.config_hash


def test_config_validation(tmp_path):
    with pytest.raises(runner.SetupError, match="unknown methods"):
        _cfg(methods=["gp"])
    with pytest.raises(runner.SetupError, match="seeds"):
        _cfg(seeds=[1, 2])
    p = tmp_path / "c.yaml"
    p.write_text("datasets: [boston_housing]\nlearning_rate: 3\n")
    with pytest.raises(runner.SetupError, match="learning_rate"):
        runner.load_config(p)
    p.write_text("datasets: [nowhere]\nmanifest: m.ini\n")
    with pytest.raises(runner.SetupError):
        runner.run_experiment(runner.load_config(p))


def test_input_ablation_and_depth():
    cfg = _cfg(repeats=2)
    recs = runner.run_input_ablation(cfg)
    assert sorted(r.extra["inputs"] for r in recs) == sorted(["x_and_z", "x_only", "z_only"] * 2)
    assert len({r["variant"] for r in runner.aggregate(recs)}) == 3
    recs, table = runner.flow_depth_ablation(cfg, [1, 3])
    assert [(row["flow_layers"], row["n"]) for row in table] == [(1, 2), (3, 2)]
    assert all(row["train_seconds"] > 0 for row in table)
    with pytest.raises(runner.SetupError):
        runner.flow_depth_ablation(cfg, [])


def test_flow_cache_reuses_bits(tmp_path):
    cfg = _cfg(methods=["hybridflow"], repeats=1)
    cold = runner.run_experiment(cfg, cache_dir=tmp_path)
    assert list(tmp_path.glob("*.npz"))
    warm = runner.run_experiment(cfg, cache_dir=tmp_path)
    assert cold[0].to_json() == warm[0].to_json()


def test_parallel_matches_serial(sweep):
    cfg, records = sweep
    par = runner.run_experiment(cfg, workers=2)
    assert [r.to_json() for r in par] == [r.to_json() for r in records]
