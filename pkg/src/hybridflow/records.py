"""Result rows for one (dataset, method, seed) cell and their JSON form."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics

COMPONENTS = ("aleatoric", "epistemic", "total")
METRIC_NAMES = ("nll", "ece", "winkler", "mpiw", "picp", "crps")


@dataclass
class ResultRecord:
    """``metrics`` maps component -> metric -> value; it is None for methods
    without uncertainty. ``wall_clock`` is kept off the serialised form so
    that record files are reproducible byte for byte."""

    dataset: str
    method: str
    seed: int
    config_hash: str
    status: str = "ok"
    rmse: float | None = None
    metrics: dict | None = None
    extra: dict = field(default_factory=dict)
    error: str | None = None
    wall_clock: float | None = None
    samples: dict | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def key(self) -> tuple:
        return (self.dataset, self.method, self.seed, json.dumps(self.extra, sort_keys=True))

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("wall_clock")
        d.pop("samples")
        return json.dumps(_clean(d), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ResultRecord":
        return cls(**json.loads(text))


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def evaluate(mean, y, components: dict | None, alpha: float = 0.05, ece_levels=10) -> tuple[float, dict | None]:
    """RMSE plus per-component metric dicts; ``components`` maps name -> variance."""
    rmse = metrics.rmse(mean, y)
    if components is None:
        return rmse, None
    scored = {}
    for name in COMPONENTS:
        if name in components:
            scored[name] = metrics.score_component(mean, components[name], y, alpha, ece_levels)
    return rmse, scored


def failed(dataset: str, method: str, seed: int, config_hash: str, err: BaseException, extra=None) -> ResultRecord:
    return ResultRecord(
        dataset=dataset,
        method=method,
        seed=seed,
        config_hash=config_hash,
        status="failed",
        error=f"{type(err).__name__}: {err}",
        extra=dict(extra or {}),
    )
