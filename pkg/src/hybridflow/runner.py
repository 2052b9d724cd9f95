"""Benchmark orchestration: config, per-cell execution, ablations, aggregation and reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import checkpoint as ckpt
from . import data as hd
from . import flow as fl
from . import hybrid as hy
from . import metrics
from . import predictor as pr
from .records import COMPONENTS, METRIC_NAMES, ResultRecord, evaluate, failed

log = logging.getLogger(__name__)

METHODS = ("mlp_no_uq", "nll", "bnll", "deep_ensemble", "hybridflow")
SYNTHETIC = "synth_heteroscedastic"


class SetupError(RuntimeError):
    """Raised before any training when a config or dataset cannot be resolved."""


@dataclass
class ExperimentConfig:
    datasets: list[str]
    methods: list[str] = field(default_factory=lambda: ["hybridflow"])
    repeats: int = 20
    seeds: list[int] | None = None
    test_fraction: float = 0.2
    flow_layers: int = 5
    flow_hidden: list[int] = field(default_factory=lambda: [32])
    flow_lr: float = 1e-3
    mc_passes: int = 30
    flow_samples: int = 100
    dropout: float = 0.2
    hidden: list[int] = field(default_factory=lambda: [50])
    lr_grid: list[float] = field(default_factory=lambda: [1e-3, 1e-4, 1e-5])
    epochs: int = 1000
    batch_size: int = 64
    patience: int = 20
    beta: float = 0.5
    ensemble_members: int = 5
    finetune_flow: bool = False
    alpha: float = 0.05
    ece_levels: int = 10
    ablate_inputs: bool = False
    depth_layers: list[int] = field(default_factory=list)
    manifest: str = "data/uci/manifest.ini"
    synthetic_n: int = 2000

    def __post_init__(self):
        if isinstance(self.datasets, str):
            self.datasets = [self.datasets]
        self.datasets = list(self.datasets)
        self.methods = list(self.methods)
        if not self.datasets:
            raise SetupError("config: datasets must not be empty")
        if not self.methods:
            raise SetupError("config: methods must not be empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise SetupError(f"config: unknown methods {unknown}; expected a subset of {METHODS}")
        if self.seeds is None:
            self.seeds = list(range(self.repeats))
        self.seeds = [int(s) for s in self.seeds]
        if len(self.seeds) != self.repeats:
            raise SetupError(f"config: repeats={self.repeats} but {len(self.seeds)} seeds given")
        if len(set(self.seeds)) != len(self.seeds):
            raise SetupError("config: seeds must be distinct")
        self.lr_grid = [float(v) for v in self.lr_grid]
        self.depth_layers = [int(k) for k in self.depth_layers]

    @property
    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def hybrid_config(self, seed: int, **overrides) -> hy.HybridConfig:
        kw = dict(
            flow_layers=self.flow_layers,
            flow_hidden=tuple(self.flow_hidden),
            flow_lr=self.flow_lr,
            flow_epochs=self.epochs,
            flow_patience=self.patience,
            hidden=tuple(self.hidden),
            dropout=self.dropout,
            lr_grid=tuple(self.lr_grid),
            epochs=self.epochs,
            batch_size=self.batch_size,
            patience=self.patience,
            mc_passes=self.mc_passes,
            flow_samples=self.flow_samples,
            finetune_flow=self.finetune_flow,
            flow_seed=seed,
            predictor_seed=seed,
        )
        kw.update(overrides)
        return hy.HybridConfig(**kw)

    def train_config(self, seed: int, loss: str) -> pr.TrainConfig:
        return pr.TrainConfig(
            loss=loss,
            beta=self.beta,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_grid=tuple(self.lr_grid),
            patience=self.patience,
            seed=seed,
        )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as err:
        raise SetupError(f"cannot read config {path}: {err}") from err
    if not isinstance(raw, dict):
        raise SetupError(f"config {path}: expected a mapping at top level")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    extra = sorted(set(raw) - known)
    if extra:
        raise SetupError(f"config {path}: unknown keys {extra}")
    if "manifest" in raw and not Path(raw["manifest"]).is_absolute():
        raw["manifest"] = str((path.parent / raw["manifest"]).resolve())
    try:
        return ExperimentConfig(**raw)
    except TypeError as err:
        raise SetupError(f"config {path}: {err}") from err


def resolve_datasets(cfg: ExperimentConfig) -> dict[str, hd.Dataset]:
    """Load every dataset up front so a bad manifest fails before training."""
    out = {}
    entries = None
    for name in cfg.datasets:
        if name == SYNTHETIC:
            out[name] = hd.synth_heteroscedastic(cfg.synthetic_n, seed=0)
            continue
        try:
            if entries is None:
                entries = hd.load_manifest(cfg.manifest)
            out[name] = hd.load_registered(name, entries)
        except hd.DataError as err:
            raise SetupError(str(err)) from err
    return out


# ---------------------------------------------------------------------------
# cells


def _prepare(ds: hd.Dataset, seed: int, test_fraction: float):
    train, test = hd.split(ds, test_fraction, seed)
    norm = hd.normalize_fit(train)
    return hd.normalize_apply(norm, train), hd.normalize_apply(norm, test), test, norm


def _cached_flow(cfg: ExperimentConfig, hcfg: hy.HybridConfig, train: hd.Dataset, cache_dir) -> fl.FlowModel | None:
    if cache_dir is None:
        return None
    key = hashlib.sha256(
        json.dumps(
            {
                "data": train.digest(),
                "layers": hcfg.flow_layers,
                "hidden": list(hcfg.flow_hidden),
                "base_hidden": hcfg.base_hidden,
                "flow": dataclasses.asdict(hcfg.flow_train_config()),
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()[:24]
    path = Path(cache_dir) / f"flow_{key}.npz"
    if path.exists():
        return ckpt.load(path)
    flow, _ = hy.fit_flow_stage(train, hcfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    ckpt.save(flow, tmp)
    tmp.replace(path)
    return flow


def _hybrid_components(model: hy.HybridModel, test: hd.Dataset, seed: int):
    rep = hy.predict_with_uncertainty(model, test, seed=seed)
    return rep.mean, {"aleatoric": rep.aleatoric, "epistemic": rep.epistemic, "total": rep.total}


def _fit_predict(method: str, cfg: ExperimentConfig, train, test, norm, seed: int, flow=None, hcfg=None):
    """Train ``method`` and return (mean, components) in target units."""
    if method in ("hybridflow",):
        model = hy.fit_hybrid(train, hcfg or cfg.hybrid_config(seed), norm, flow=flow)
        return _hybrid_components(model, test, seed)
    x, y = train.X, train.Y
    if method == "mlp_no_uq":
        init = pr.build_predictor(train.d_in, train.d_out, cfg.hidden, "point", cfg.dropout, seed=seed)
        model, _, _ = pr.train_predictor(init, x, y, cfg.train_config(seed, "mse"))
        return hd.denormalize_targets(norm, pr.deterministic_predict(model, test.X)), None
    if method in ("nll", "bnll"):
        loss = "gaussian_nll" if method == "nll" else "beta_nll"
        init = pr.build_predictor(train.d_in, train.d_out, cfg.hidden, "heteroscedastic", cfg.dropout, seed=seed)
        model, _, _ = pr.train_predictor(init, x, y, cfg.train_config(seed, loss))
        mean, epi, ale = pr.mc_dropout_heteroscedastic(model, test.X, cfg.mc_passes, seed)
    elif method == "deep_ensemble":
        ens = pr.train_ensemble(x, y, cfg.train_config(seed, "gaussian_nll"), cfg.ensemble_members, cfg.hidden, "heteroscedastic", 0.0)
        mean, epi, ale = pr.ensemble_predict(ens, test.X)
    else:
        raise ValueError(f"unknown method {method!r}")
    mean = hd.denormalize_targets(norm, mean)
    ale = hd.denormalize_targets(norm, ale, "variances")
    epi = hd.denormalize_targets(norm, epi, "variances")
    return mean, {"aleatoric": ale, "epistemic": epi, "total": ale + epi}


def _record(ds_name, method, seed, cfg, mean, comps, y, extra=None, wall=None) -> ResultRecord:
    rmse, scored = evaluate(mean, y, comps, cfg.alpha, cfg.ece_levels)
    samples = None
    if comps is not None:
        samples = {"aleatoric": np.asarray(comps["aleatoric"]).ravel().tolist(), "epistemic": np.asarray(comps["epistemic"]).ravel().tolist()}
    return ResultRecord(
        dataset=ds_name,
        method=method,
        seed=seed,
        config_hash=cfg.config_hash,
        rmse=rmse,
        metrics=scored,
        extra=dict(extra or {}),
        wall_clock=wall,
        samples=samples,
    )


def run_cell(ds: hd.Dataset, method: str, seed: int, cfg: ExperimentConfig, cache_dir=None) -> ResultRecord:
    """One (dataset, method, seed) cell; exceptions become a failed record."""
    t0 = time.perf_counter()
    try:
        train, test, test_raw, norm = _prepare(ds, seed, cfg.test_fraction)
        flow = None
        if method == "hybridflow":
            flow = _cached_flow(cfg, cfg.hybrid_config(seed), train, cache_dir)
        mean, comps = _fit_predict(method, cfg, train, test, norm, seed, flow=flow)
        return _record(ds.name, method, seed, cfg, mean, comps, test_raw.Y, wall=time.perf_counter() - t0)
    except Exception as err:  # noqa: BLE001 - a failing cell must not abort the sweep
        log.error("cell (%s, %s, seed %d) failed: %s", ds.name, method, seed, err)
        return failed(ds.name, method, seed, cfg.config_hash, err)


def input_ablation_cell(ds: hd.Dataset, seed: int, cfg: ExperimentConfig, cache_dir=None) -> list[ResultRecord]:
    """All three input modes on one split, sharing a single trained flow."""
    try:
        train, test, test_raw, norm = _prepare(ds, seed, cfg.test_fraction)
        hcfg = cfg.hybrid_config(seed)
        flow = _cached_flow(cfg, hcfg, train, cache_dir) or hy.fit_flow_stage(train, hcfg)[0]
    except Exception as err:  # noqa: BLE001
        return [failed(ds.name, "hybridflow", seed, cfg.config_hash, err, {"inputs": m}) for m in hy.INPUT_MODES]
    out = []
    for mode in hy.INPUT_MODES:
        t0 = time.perf_counter()
        try:
            _, rep = hy.input_ablation(train, test, mode, hcfg, norm, flow=flow)
            comps = {"aleatoric": rep.aleatoric, "epistemic": rep.epistemic, "total": rep.total}
            out.append(_record(ds.name, "hybridflow", seed, cfg, rep.mean, comps, test_raw.Y, {"inputs": mode}, time.perf_counter() - t0))
        except Exception as err:  # noqa: BLE001
            out.append(failed(ds.name, "hybridflow", seed, cfg.config_hash, err, {"inputs": mode}))
    return out


def depth_cell(ds: hd.Dataset, seed: int, layers: int, cfg: ExperimentConfig) -> ResultRecord:
    """Hybrid model with ``layers`` flow layers; ``wall_clock`` is the training time."""
    extra = {"flow_layers": layers}
    try:
        train, test, test_raw, norm = _prepare(ds, seed, cfg.test_fraction)
        t0 = time.perf_counter()
        model = hy.fit_hybrid(train, cfg.hybrid_config(seed, flow_layers=layers), norm)
        train_time = time.perf_counter() - t0
        mean, comps = _hybrid_components(model, test, seed)
        rec = _record(ds.name, "hybridflow", seed, cfg, mean, comps, test_raw.Y, extra, train_time)
        return rec
    except Exception as err:  # noqa: BLE001
        return failed(ds.name, "hybridflow", seed, cfg.config_hash, err, extra)


def _execute(tasks: list[tuple], workers: int) -> list:
    if workers <= 1:
        return [fn(*args) for fn, *args in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for fn, *args in tasks]
        return [f.result() for f in futures]


def run_experiment(cfg: ExperimentConfig, workers: int = 1, cache_dir=None) -> list[ResultRecord]:
    """Every (dataset, method, seed) cell, in config order."""
    datasets = resolve_datasets(cfg)
    tasks = [(run_cell, datasets[d], m, s, cfg, cache_dir) for d in cfg.datasets for m in cfg.methods for s in cfg.seeds]
    return _execute(tasks, workers)


def run_input_ablation(cfg: ExperimentConfig, workers: int = 1, cache_dir=None) -> list[ResultRecord]:
    datasets = resolve_datasets(cfg)
    tasks = [(input_ablation_cell, datasets[d], s, cfg, cache_dir) for d in cfg.datasets for s in cfg.seeds]
    return [r for group in _execute(tasks, workers) for r in group]


def flow_depth_ablation(cfg: ExperimentConfig, layers, workers: int = 1) -> tuple[list[ResultRecord], list[dict]]:
    """Vary only the number of flow layers. Returns the records and a table of
    ``{dataset, flow_layers, n, rmse_mean, rmse_std, train_seconds}`` rows."""
    layers = [int(k) for k in layers]
    if not layers:
        raise SetupError("flow_depth_ablation: layer list must not be empty")
    if min(layers) < 1:
        raise SetupError(f"flow_depth_ablation: layer counts must be >= 1, got {layers}")
    datasets = resolve_datasets(cfg)
    tasks = [(depth_cell, datasets[d], s, k, cfg) for d in cfg.datasets for k in layers for s in cfg.seeds]
    records = _execute(tasks, workers)
    table = []
    for d in cfg.datasets:
        for k in layers:
            rows = [r for r in records if r.dataset == d and r.extra.get("flow_layers") == k and r.ok]
            rm = np.array([r.rmse for r in rows])
            tt = np.array([r.wall_clock for r in rows])
            table.append(
                {
                    "dataset": d,
                    "flow_layers": k,
                    "n": len(rows),
                    "rmse_mean": float(rm.mean()) if len(rm) else None,
                    "rmse_std": float(rm.std(ddof=1)) if len(rm) > 1 else None,
                    "train_seconds": float(tt.mean()) if len(tt) else None,
                }
            )
    return records, table


# ---------------------------------------------------------------------------
# aggregation and reporting


def _variant(rec: ResultRecord) -> str:
    return ",".join(f"{k}={rec.extra[k]}" for k in sorted(rec.extra))


def _mean_std(values) -> tuple[float | None, float | None]:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if len(v) == 0:
        return None, None
    return float(v.mean()), (float(v.std(ddof=1)) if len(v) > 1 else None)


def aggregate(records) -> list[dict]:
    """Mean and sample std per (dataset, method, variant); failed rows are
    excluded and counted. Output is sorted, so record order does not matter."""
    groups: dict[tuple, list[ResultRecord]] = {}
    for r in records:
        groups.setdefault((r.dataset, r.method, _variant(r)), []).append(r)
    rows = []
    for (dataset, method, variant) in sorted(groups):
        recs = sorted(groups[(dataset, method, variant)], key=lambda r: r.seed)
        ok = [r for r in recs if r.ok]
        row = {
            "dataset": dataset,
            "method": method,
            "variant": variant,
            "n": len(ok),
            "n_failed": len(recs) - len(ok),
        }
        row["rmse_mean"], row["rmse_std"] = _mean_std(r.rmse for r in ok)
        for comp in COMPONENTS:
            for name in METRIC_NAMES:
                vals = [r.metrics[comp][name] for r in ok if r.metrics and comp in r.metrics]
                row[f"{comp}_{name}_mean"], row[f"{comp}_{name}_std"] = _mean_std(vals) if vals else (None, None)
        rows.append(row)
    return rows


def disentanglement_report(records) -> list[dict]:
    """Spearman and Pearson coefficients between pooled per-sample aleatoric
    and epistemic variances, per (dataset, method, variant)."""
    pools: dict[tuple, tuple[list, list]] = {}
    for r in records:
        if not r.ok or not r.samples:
            continue
        a, e = pools.setdefault((r.dataset, r.method, _variant(r)), ([], []))
        a.extend(r.samples["aleatoric"])
        e.extend(r.samples["epistemic"])
    out = []
    for key in sorted(pools):
        a, e = (np.asarray(v) for v in pools[key])
        row = {"dataset": key[0], "method": key[1], "variant": key[2], "n": len(a), "flagged": False}
        degenerate = len(a) < 3 or np.ptp(a) == 0 or np.ptp(e) == 0
        if degenerate:
            row.update(spearman=None, pearson=None, flagged=True)
        else:
            row["spearman"] = metrics.correlation(a, e, "spearman")
            row["pearson"] = metrics.correlation(a, e, "pearson")
        out.append(row)
    return out


def _fmt(v) -> str:
    if v is None:
        return "NA"
    return repr(float(v))


def _write_csv(path: Path, rows: list[dict], delimiter: str = ","):
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), delimiter=delimiter, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) or v is None else v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def _pm(mean, std) -> str:
    if mean is None:
        return "NA"
    return f"{mean:.3f}" if std is None else f"{mean:.3f} ± {std:.3f}"


def rmse_table(agg: list[dict]) -> str:
    """Datasets as rows, methods (with variant) as columns, ``mean ± std`` cells."""
    cols = sorted({(r["method"], r["variant"]) for r in agg})
    names = [m if not v else f"{m}[{v}]" for m, v in cols]
    lines = ["\t".join(["dataset", *names])]
    for d in sorted({r["dataset"] for r in agg}):
        cells = {(r["method"], r["variant"]): r for r in agg if r["dataset"] == d}
        lines.append("\t".join([d, *(_pm(cells[c]["rmse_mean"], cells[c]["rmse_std"]) if c in cells else "NA" for c in cols)]))
    return "\n".join(lines) + "\n"


def uncertainty_table(agg: list[dict]) -> str:
    """One row per (dataset, method, component) with every interval/scoring metric."""
    lines = ["\t".join(["dataset", "method", "component", *METRIC_NAMES])]
    for r in agg:
        if r[f"total_nll_mean"] is None:
            continue
        method = r["method"] if not r["variant"] else f"{r['method']}[{r['variant']}]"
        for comp in COMPONENTS:
            cells = [_pm(r[f"{comp}_{m}_mean"], r[f"{comp}_{m}_std"]) for m in METRIC_NAMES]
            lines.append("\t".join([r["dataset"], method, comp, *cells]))
    return "\n".join(lines) + "\n"


def _record_name(r: ResultRecord) -> str:
    variant = _variant(r).replace("=", "-").replace(",", "_")
    return f"{r.dataset}__{r.method}{'__' + variant if variant else ''}__seed{r.seed}"


def emit_report(records, out_dir, config: ExperimentConfig | None = None) -> dict[str, Path]:
    """Write record files, aggregate tables, point clouds and a reproducibility
    manifest. Identical records give byte-identical files."""
    out = Path(out_dir)
    written: dict[str, Path] = {}
    try:
        (out / "records").mkdir(parents=True, exist_ok=True)
        (out / "samples").mkdir(exist_ok=True)
    except OSError as err:
        raise SetupError(f"cannot create output directory {out}: {err}") from err
    records = sorted(records, key=lambda r: r.key)
    names = [_record_name(r) for r in records]
    if len(set(names)) != len(names):
        raise ValueError("emit_report: duplicate (dataset, method, variant, seed) records")
    timings = {}
    for name, r in zip(names, records):
        path = out / "records" / f"{name}.json"
        path.write_text(r.to_json() + "\n")
        timings[name] = r.wall_clock
        if r.samples:
            arr = np.column_stack([r.samples["aleatoric"], r.samples["epistemic"]])
            buf = io.StringIO()
            np.savetxt(buf, arr, fmt="%.17g", delimiter=",", header="aleatoric,epistemic", comments="")
            (out / "samples" / f"{name}.csv").write_text(buf.getvalue())
    agg = aggregate(records)
    _write_csv(out / "aggregate.csv", agg)
    (out / "rmse_table.tsv").write_text(rmse_table(agg))
    (out / "uncertainty_table.tsv").write_text(uncertainty_table(agg))
    _write_csv(out / "disentanglement.csv", disentanglement_report(records))
    (out / "timings.json").write_text(json.dumps(timings, sort_keys=True, indent=1) + "\n")
    manifest = {
        "library_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "config_hashes": sorted({r.config_hash for r in records}),
        "seeds": sorted({r.seed for r in records}),
        "n_records": len(records),
        "n_failed": sum(not r.ok for r in records),
    }
    if config is not None:
        manifest["config"] = dataclasses.asdict(config)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    for name in ("aggregate.csv", "rmse_table.tsv", "uncertainty_table.tsv", "disentanglement.csv", "manifest.json", "timings.json"):
        written[name] = out / name
    written["records"] = out / "records"
    return written


def load_records(out_dir) -> list[ResultRecord]:
    """Read records (plus timings and per-sample arrays when present) written by :func:`emit_report`."""
    out = Path(out_dir)
    rec_dir = out / "records" if (out / "records").is_dir() else out
    files = sorted(rec_dir.glob("*.json"))
    if not files:
        raise SetupError(f"no record files found in {rec_dir}")
    timings_path = out / "timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    records = []
    for f in files:
        r = ResultRecord.from_json(f.read_text())
        r.wall_clock = timings.get(f.stem)
        sample_path = out / "samples" / f"{f.stem}.csv"
        if sample_path.exists():
            arr = np.loadtxt(sample_path, delimiter=",", skiprows=1, ndmin=2)
            r.samples = {"aleatoric": arr[:, 0].tolist(), "epistemic": arr[:, 1].tolist()}
        records.append(r)
    return records
