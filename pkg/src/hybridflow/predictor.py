"""MLP predictors: point (MSE) and heteroscedastic (Gaussian NLL / Beta-NLL) heads,
MC-dropout inference and deep ensembles."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradtensor as gt
from .gradtensor import Tensor, adam_init
from .training import fit_minibatch, holdout_split

log = logging.getLogger(__name__)

HEADS = ("point", "heteroscedastic")
LOSSES = ("mse", "gaussian_nll", "beta_nll")


@dataclass
class PredictorModel:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (50,)
    head: str = "point"
    dropout: float = 0.2
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")

    @property
    def n_outputs(self) -> int:
        return 2 * self.output_dim if self.head == "heteroscedastic" else self.output_dim

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


@dataclass
class EnsembleModel:
    members: list[PredictorModel]

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least 2 members")


@dataclass
class TrainConfig:
    loss: str = "mse"
    beta: float = 0.5
    epochs: int = 1000
    batch_size: int = 64
    lr_grid: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    patience: int = 20
    val_fraction: float = 0.1
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        self.lr_grid = tuple(float(lr) for lr in self.lr_grid)
        if not self.lr_grid:
            raise ValueError("lr_grid must not be empty")


def build_predictor(input_dim: int, output_dim: int = 1, hidden=(50,), head: str = "point", dropout: float = 0.2, seed=0) -> PredictorModel:
    """Fan-in scaled uniform initialisation for every layer."""
    model = PredictorModel(input_dim, output_dim, tuple(hidden), head, dropout)
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *model.hidden, model.n_outputs]
    for l, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        model.params[f"W{l}"] = Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True)
        model.params[f"b{l}"] = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
    return model


def predictor_forward(model: PredictorModel, x, rng=None) -> tuple[Tensor, Tensor | None]:
    """Forward pass; dropout (inverted) is active iff ``rng`` is given.

    ``rng`` needs only a ``random(shape)`` method. Returns ``(mu, logvar)``
    with ``logvar`` None for point heads.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 2 or h.shape[1] != model.input_dim:
        raise ValueError(f"predictor_forward: input shape {h.shape}, expected [batch, {model.input_dim}]")
    p = model.params
    n_hidden = len(model.hidden)
    keep = 1.0 - model.dropout
    for l in range(n_hidden):
        h = gt.relu(gt.masked_linear(h, p[f"W{l}"], None, p[f"b{l}"]))
        if rng is not None and model.dropout > 0:
            mask = (rng.random(h.shape) < keep) / keep
            h = gt.mul(h, mask)
    out = gt.masked_linear(h, p[f"W{n_hidden}"], None, p[f"b{n_hidden}"])
    if model.head == "point":
        return out, None
    k = model.output_dim
    return gt.slice_last_axis(out, 0, k), gt.slice_last_axis(out, k, 2 * k)


# ---------------------------------------------------------------------------
# losses


def _nll_terms(mu, logvar, y) -> Tensor:
    r = gt.sub(y, mu)
    return gt.add(gt.mul(0.5, gt.mul(gt.exp(gt.neg(logvar)), gt.mul(r, r))), gt.mul(0.5, logvar))


def gaussian_nll_loss(mu, logvar, y) -> Tensor:
    """Heteroscedastic loss: mean of ``0.5 * exp(-logvar) * (y - mu)^2 + 0.5 * logvar``.

    The constant ``0.5 * log(2 pi)`` is dropped. The mean runs over every
    element, so multi-output targets weigh each dimension equally.
    """
    return gt.reduce_mean(_nll_terms(mu, logvar, y))


def beta_nll_loss(mu, logvar, y, beta: float = 0.5) -> Tensor:
    """Per-element NLL weighted by ``stop_grad(sigma^2) ** beta``; ``beta=0`` is plain NLL."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    terms = _nll_terms(mu, logvar, y)
    if beta == 0.0:
        return gt.reduce_mean(terms)
    lv = logvar.data if isinstance(logvar, Tensor) else np.asarray(logvar, dtype=np.float64)
    weight = np.exp(beta * lv)
    return gt.reduce_mean(gt.mul(weight, terms))


def mse_loss(mu, y) -> Tensor:
    r = gt.sub(y, mu)
    return gt.reduce_mean(gt.mul(r, r))


def _loss(model: PredictorModel, cfg: TrainConfig, x: Tensor, y: Tensor, rng) -> Tensor:
    mu, logvar = predictor_forward(model, x, rng)
    if cfg.loss == "mse":
        return mse_loss(mu, y)
    if logvar is None:
        raise ValueError(f"loss {cfg.loss!r} needs a heteroscedastic head")
    if cfg.loss == "gaussian_nll":
        return gaussian_nll_loss(mu, logvar, y)
    return beta_nll_loss(mu, logvar, y, cfg.beta)


# ---------------------------------------------------------------------------
# training


def train_predictor(model: PredictorModel, x, y, cfg: TrainConfig | None = None) -> tuple[PredictorModel, float, dict]:
    """Grid-search the learning rate with early stopping on a 10% holdout.

    Every grid run starts from ``model``'s initial weights and uses the same
    holdout split and shuffling seed. Returns ``(best_model, best_lr,
    history)``; ``history`` maps each lr to its loss curves.
    """
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
    if y.shape[1] != model.output_dim:
        raise ValueError(f"train_predictor: targets have {y.shape[1]} columns, model outputs {model.output_dim}")
    fit_idx, val_idx = holdout_split(len(x), cfg.val_fraction, np.random.default_rng(cfg.seed))
    xf, yf = x[fit_idx], y[fit_idx]
    xv, yv = Tensor(x[val_idx]), Tensor(y[val_idx])

    best = None
    histories = {}
    for lr in cfg.lr_grid:
        candidate = copy.deepcopy(model)
        params = candidate.parameters()
        state = adam_init(params, lr, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng([cfg.seed, 1])

        def batch_loss(idx, candidate=candidate, rng=rng):
            return _loss(candidate, cfg, Tensor(xf[idx]), Tensor(yf[idx]), rng)

        def val_loss(candidate=candidate):
            return float(_loss(candidate, cfg, xv, yv, None).data)

        try:
            hist = fit_minibatch(
                [(params, state)],
                batch_loss,
                val_loss,
                len(fit_idx),
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                patience=cfg.patience,
                rng=rng,
                label=f"train_predictor(lr={lr:g})",
            )
        except FloatingPointError as err:
            log.warning("learning rate %g diverged: %s", lr, err)
            histories[lr] = {"diverged": str(err)}
            continue
        histories[lr] = hist
        score = hist["best_val"][0]
        if best is None or score < best[0]:
            best = (score, lr, candidate)
    if best is None:
        raise FloatingPointError(f"train_predictor: every learning rate in {cfg.lr_grid} diverged")
    return best[2], best[1], histories


def train_ensemble(x, y, cfg: TrainConfig, n_members: int = 5, hidden=(50,), head: str = "heteroscedastic", dropout: float = 0.0) -> EnsembleModel:
    """Train ``n_members`` predictors from independent seeds ``cfg.seed + m``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
    input_dim, output_dim = x.shape[1], y.shape[1]
    members = []
    for m in range(n_members):
        member_cfg = copy.copy(cfg)
        member_cfg.seed = cfg.seed + m
        model = build_predictor(input_dim, output_dim, hidden, head, dropout, seed=member_cfg.seed)
        model, _, _ = train_predictor(model, x, y, member_cfg)
        members.append(model)
    return EnsembleModel(members)


# ---------------------------------------------------------------------------
# inference


def _mc_passes(model: PredictorModel, x, passes: int, seed) -> tuple[np.ndarray, np.ndarray | None]:
    if passes < 2:
        raise ValueError(f"mc_dropout_predict: need at least 2 passes, got {passes}")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed) if seed is None or isinstance(seed, (int, np.integer)) else seed
    n = len(x)
    # one stacked forward with an independent mask per row equals `passes` separate passes
    mu, logvar = predictor_forward(model, np.tile(x, (passes, 1)), rng if model.dropout > 0 else None)
    mus = mu.data.reshape(passes, n, -1)
    vars_ = None if logvar is None else np.exp(logvar.data).reshape(passes, n, -1)
    return mus, vars_


def _spread(mus: np.ndarray) -> np.ndarray:
    # deviations from the first pass, so identical passes give exactly zero
    return (mus - mus[0]).var(axis=0, ddof=1)


def mc_dropout_predict(model: PredictorModel, x, passes: int = 30, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased variance of the mean head across dropout passes."""
    mus, _ = _mc_passes(model, x, passes, seed)
    return mus.mean(axis=0), _spread(mus)


def mc_dropout_heteroscedastic(model: PredictorModel, x, passes: int = 30, seed=0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(mean, epistemic, aleatoric)``: variance of mu and mean of sigma^2 across passes."""
    mus, vars_ = _mc_passes(model, x, passes, seed)
    if vars_ is None:
        raise ValueError("mc_dropout_heteroscedastic: model has a point head")
    return mus.mean(axis=0), _spread(mus), vars_.mean(axis=0)


def deterministic_predict(model: PredictorModel, x) -> np.ndarray:
    mu, _ = predictor_forward(model, np.asarray(x, dtype=np.float64))
    return mu.data


def ensemble_predict(ens: EnsembleModel, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mixture moments: mean of member means, population variance of member
    means (epistemic) and mean of member variances (aleatoric; zeros for point heads)."""
    dims = {m.output_dim for m in ens.members}
    if len(dims) != 1:
        raise ValueError(f"ensemble_predict: members disagree on output dim: {sorted(dims)}")
    x = np.asarray(x, dtype=np.float64)
    mus, variances = [], []
    for m in ens.members:
        mu, logvar = predictor_forward(m, x)
        mus.append(mu.data)
        variances.append(np.zeros_like(mu.data) if logvar is None else np.exp(logvar.data))
    mus = np.stack(mus)
    return mus.mean(axis=0), mus.var(axis=0), np.mean(variances, axis=0)
