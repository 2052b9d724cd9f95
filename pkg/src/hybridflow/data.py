"""Tabular datasets: delimited-text ingestion, a manifest-driven UCI registry,
seeded splits, train-only normalisation and a heteroscedastic synthetic task."""

from __future__ import annotations

import configparser
import csv
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# Names used in the benchmark tables, in table order.
UCI_DATASETS = (
    "boston_housing",
    "carbon",
    "concrete",
    "power_plant",
    "energy",
    "kin8nm",
    "naval",
    "protein",
    "superconductivity",
    "wine_red",
    "wine_white",
    "yacht",
)


class DataError(ValueError):
    """Base class for ingestion failures."""


class UnreadableFileError(DataError):
    pass


class NoUsableRowsError(DataError):
    pass


class UnknownColumnError(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    name: str
    X: np.ndarray
    Y: np.ndarray
    feature_names: tuple[str, ...] = ()
    target_names: tuple[str, ...] = ()
    provenance: str = ""
    n_dropped: int = 0
    row_ids: np.ndarray | None = None
    noise_var: np.ndarray | None = None
    normalizer_hash: str | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or len(X) != len(Y):
            raise DataError(f"{self.name}: features {X.shape} and targets {Y.shape} disagree")
        if len(X) < 1:
            raise NoUsableRowsError(f"{self.name}: dataset has no rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise DataError(f"{self.name}: non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if self.row_ids is None:
            object.__setattr__(self, "row_ids", np.arange(len(X)))

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    @property
    def d_out(self) -> int:
        return self.Y.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        noise = None if self.noise_var is None else self.noise_var[idx]
        return replace(self, X=self.X[idx], Y=self.Y[idx], row_ids=self.row_ids[idx], noise_var=noise)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.X, self.Y, self.row_ids):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# ingestion


def _parse_columns(spec) -> list:
    if isinstance(spec, (list, tuple)):
        items = list(spec)
    else:
        items = [s.strip() for s in str(spec).split(",") if s.strip()]
    out = []
    for item in items:
        try:
            out.append(int(item))
        except (TypeError, ValueError):
            out.append(str(item))
    return out


def _split_line(line: str, delimiter: str | None) -> list[str]:
    if delimiter is None:
        return line.split()
    return next(csv.reader([line], delimiter=delimiter))


def load_csv(path, target_columns, header: bool = True, delimiter: str | None = ",", name: str | None = None) -> Dataset:
    """Read a delimited text file; every non-target column is a feature.

    ``target_columns`` are header names or integer positions (negative
    allowed). ``delimiter=None`` splits on runs of whitespace. Rows with a
    missing or non-numeric cell are dropped and counted in ``n_dropped``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise UnreadableFileError(f"cannot read {path}: {err}") from err
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise NoUsableRowsError(f"{path}: file is empty")
    rows = [[c.strip() for c in _split_line(ln, delimiter)] for ln in lines]
    # trailing delimiters produce an empty last cell on every row
    if all(r and r[-1] == "" for r in rows):
        rows = [r[:-1] for r in rows]
    if header:
        names, rows = rows[0], rows[1:]
    else:
        names = [f"col{i}" for i in range(len(rows[0]))]
    width = len(names)

    targets = []
    for col in _parse_columns(target_columns):
        if isinstance(col, int):
            if not -width <= col < width:
                raise UnknownColumnError(f"{path}: column index {col} out of range for {width} columns")
            targets.append(col % width)
        elif col in names:
            targets.append(names.index(col))
        else:
            raise UnknownColumnError(f"{path}: unknown column {col!r}; available: {names}")
    features = [i for i in range(width) if i not in targets]

    kept, dropped = [], 0
    for r in rows:
        if len(r) != width:
            dropped += 1
            continue
        try:
            vals = [float(c) for c in r]
        except ValueError:
            dropped += 1
            continue
        if not all(math.isfinite(v) for v in vals):
            dropped += 1
            continue
        kept.append(vals)
    if not kept:
        raise NoUsableRowsError(f"{path}: no usable rows ({dropped} dropped)")
    if dropped:
        log.info("%s: dropped %d malformed rows", path, dropped)
    arr = np.array(kept)
    return Dataset(
        name=name or path.stem,
        X=arr[:, features],
        Y=arr[:, targets],
        feature_names=tuple(names[i] for i in features),
        target_names=tuple(names[i] for i in targets),
        provenance=str(path),
        n_dropped=dropped,
    )


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    path: Path
    target_columns: tuple
    delimiter: str | None = ","
    header: bool = True


def load_manifest(path) -> dict[str, ManifestEntry]:
    """Parse an INI manifest: one section per dataset with ``path``,
    ``target_columns``, ``delimiter`` (``whitespace`` for runs of blanks) and
    ``header``. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ManifestError(f"cannot read manifest {path}")
    entries = {}
    for name in parser.sections():
        sec = parser[name]
        if "path" not in sec or "target_columns" not in sec:
            raise ManifestError(f"{path}: section [{name}] needs 'path' and 'target_columns'")
        delim = sec.get("delimiter", ",")
        delim = None if delim.strip().lower() in ("whitespace", "space", "") else delim.strip()
        file_path = Path(sec["path"])
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        entries[name] = ManifestEntry(
            name=name,
            path=file_path,
            target_columns=tuple(_parse_columns(sec["target_columns"])),
            delimiter=delim,
            header=sec.getboolean("header", fallback=True),
        )
    return entries


def load_registered(name: str, manifest) -> Dataset:
    entries = manifest if isinstance(manifest, dict) else load_manifest(manifest)
    if name not in entries:
        raise ManifestError(f"dataset {name!r} is not listed in the manifest (known: {sorted(entries)})")
    e = entries[name]
    return load_csv(e.path, e.target_columns, header=e.header, delimiter=e.delimiter, name=name)


# ---------------------------------------------------------------------------
# splitting and normalisation


def split(ds: Dataset, test_fraction: float = 0.2, seed=0) -> tuple[Dataset, Dataset]:
    """Seeded uniform shuffle into disjoint (train, test) partitions."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"split: test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(round(ds.n * test_fraction))
    if n_test == 0 or n_test == ds.n:
        raise ValueError(f"split: {ds.n} rows at fraction {test_fraction} leaves an empty partition")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


@dataclass(frozen=True)
class Normalizer:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    kept_features: np.ndarray
    fitted_on: str = ""

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.feature_mean, self.feature_std, self.target_mean, self.target_std, self.kept_features):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def transform_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (X[:, self.kept_features] - self.feature_mean) / self.feature_std

    def transform_targets(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=np.float64).reshape(-1, len(self.target_mean))
        return (Y - self.target_mean) / self.target_std


def normalize_fit(train: Dataset) -> Normalizer:
    """Per-column mean/std from the training split; constant feature columns are dropped."""
    fstd = train.X.std(axis=0)
    kept = np.flatnonzero(fstd > 0)
    if len(kept) < train.d_in:
        dropped = [train.feature_names[i] if train.feature_names else i for i in np.flatnonzero(fstd == 0)]
        warnings.warn(f"{train.name}: dropping constant feature columns {dropped}", RuntimeWarning, stacklevel=2)
    tstd = train.Y.std(axis=0)
    if np.any(tstd == 0):
        warnings.warn(f"{train.name}: constant target column; using unit scale", RuntimeWarning, stacklevel=2)
        tstd = np.where(tstd == 0, 1.0, tstd)
    return Normalizer(
        feature_mean=train.X[:, kept].mean(axis=0),
        feature_std=fstd[kept],
        target_mean=train.Y.mean(axis=0),
        target_std=tstd,
        kept_features=kept,
        fitted_on=train.digest(),
    )


def normalize_apply(norm: Normalizer, ds: Dataset) -> Dataset:
    names = tuple(ds.feature_names[i] for i in norm.kept_features) if ds.feature_names else ()
    noise = None if ds.noise_var is None else ds.noise_var / norm.target_std**2
    return replace(
        ds,
        X=norm.transform_features(ds.X),
        Y=norm.transform_targets(ds.Y),
        feature_names=names,
        noise_var=noise,
        normalizer_hash=norm.digest,
    )


def denormalize_targets(norm: Normalizer, values, kind: str = "values") -> np.ndarray:
    """Map normalised predictions back to target units.

    ``kind="variances"`` scales by ``std**2`` only; the mean shift cancels.
    """
    values = np.asarray(values, dtype=np.float64)
    shape = values.shape
    values = values.reshape(-1, len(norm.target_mean))
    if kind == "values":
        out = values * norm.target_std + norm.target_mean
    elif kind == "variances":
        out = values * norm.target_std**2
    else:
        raise ValueError(f"denormalize_targets: kind must be 'values' or 'variances', got {kind!r}")
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """``y = sin(frequency * x) + eps``, ``sd(eps) = sd_intercept + sd_slope * x^2``, ``x ~ U[low, high]``."""

    frequency: float = 2.0
    sd_intercept: float = 0.1
    sd_slope: float = 0.4
    low: float = -1.0
    high: float = 1.0

    def noise_sd(self, x) -> np.ndarray:
        return self.sd_intercept + self.sd_slope * np.asarray(x) ** 2

    def mean(self, x) -> np.ndarray:
        return np.sin(self.frequency * np.asarray(x))


def synth_heteroscedastic(n: int, seed=0, spec: SynthSpec | None = None) -> Dataset:
    """1-D heteroscedastic regression with the true noise variance attached as ``noise_var``."""
    if n < 10:
        raise ValueError(f"synth_heteroscedastic: n must be >= 10, got {n}")
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    x = rng.uniform(spec.low, spec.high, size=n)
    sd = spec.noise_sd(x)
    y = spec.mean(x) + sd * rng.standard_normal(n)
    return Dataset(
        name="synth_heteroscedastic",
        X=x[:, None],
        Y=y[:, None],
        feature_names=("x",),
        target_names=("y",),
        provenance=f"synthetic {spec}",
        noise_var=(sd**2)[:, None],
    )
