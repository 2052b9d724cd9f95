"""Two-stage hybrid model: a conditional flow supplies a latent ``z`` per row and
an aleatoric variance, and an MLP on ``[x, z]`` supplies the mean and an
epistemic variance."""

from __future__ import annotations

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import gradtensor as gt
from . import predictor as pr
from .data import Dataset, Normalizer, denormalize_targets
from .flow import (
    FlowModel,
    FlowTrainConfig,
    _inverse_t,
    aleatoric_variance,
    build_flow,
    latent_expected,
    latent_from_target,
    train_flow,
)
from .gradtensor import Tensor, adam_init
from .training import fit_minibatch, holdout_split

log = logging.getLogger(__name__)

INPUT_MODES = ("x_and_z", "x_only", "z_only")
EPISTEMIC = ("mc_dropout", "ensemble")


@dataclass
class HybridConfig:
    flow_layers: int = 5
    flow_hidden: tuple[int, ...] = (32,)
    base_hidden: int = 32
    flow_lr: float = 1e-3
    flow_epochs: int = 1000
    flow_patience: int = 20
    hidden: tuple[int, ...] = (50,)
    dropout: float = 0.2
    lr_grid: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    epochs: int = 1000
    batch_size: int = 64
    patience: int = 20
    val_fraction: float = 0.1
    mc_passes: int = 30
    flow_samples: int = 100
    epistemic: str = "mc_dropout"
    ensemble_members: int = 5
    inputs: str = "x_and_z"
    finetune_flow: bool = False
    finetune_lr: float = 1e-6
    flow_seed: int = 0
    predictor_seed: int = 0

    def __post_init__(self):
        self.flow_hidden = tuple(int(h) for h in self.flow_hidden)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.lr_grid = tuple(float(v) for v in self.lr_grid)
        if self.inputs not in INPUT_MODES:
            raise ValueError(f"HybridConfig: inputs must be one of {INPUT_MODES}, got {self.inputs!r}")
        if self.epistemic not in EPISTEMIC:
            raise ValueError(f"HybridConfig: epistemic must be one of {EPISTEMIC}, got {self.epistemic!r}")
        if self.finetune_flow and self.epistemic != "mc_dropout":
            raise ValueError("HybridConfig: flow fine-tuning is only supported with a single MC-dropout predictor")
        if self.mc_passes < 2 or self.flow_samples < 2:
            raise ValueError("HybridConfig: mc_passes and flow_samples must be >= 2")

    def flow_train_config(self) -> FlowTrainConfig:
        return FlowTrainConfig(
            epochs=self.flow_epochs,
            batch_size=self.batch_size,
            lr=self.flow_lr,
            patience=self.flow_patience,
            val_fraction=self.val_fraction,
            seed=self.flow_seed,
        )

    def predictor_train_config(self) -> pr.TrainConfig:
        return pr.TrainConfig(
            loss="mse",
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_grid=self.lr_grid,
            patience=self.patience,
            val_fraction=self.val_fraction,
            seed=self.predictor_seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class HybridModel:
    flow: FlowModel
    predictor: pr.PredictorModel | pr.EnsembleModel
    config: HybridConfig
    normalizer: Normalizer | None = None
    best_lr: float | None = None
    timings: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return {"x_and_z": self.flow.c + self.flow.d, "x_only": self.flow.c, "z_only": self.flow.d}[self.config.inputs]


@dataclass(frozen=True)
class UncertaintyReport:
    """Per-row predictions; ``total`` is ``aleatoric + epistemic`` by construction."""

    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.aleatoric + self.epistemic

    def component(self, name: str) -> np.ndarray:
        if name not in ("aleatoric", "epistemic", "total"):
            raise KeyError(f"unknown uncertainty component {name!r}")
        return getattr(self, name)


def feature_concat(x, z) -> np.ndarray:
    """``[x, z]`` along the last axis, ``x`` first."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(len(z), -1) if len(z) == len(x) else z.reshape(len(x), 0)
    if x.shape[0] != z.shape[0]:
        raise ValueError(f"feature_concat: batch mismatch {x.shape[0]} vs {z.shape[0]}")
    return np.concatenate([x, z], axis=-1)


def select_features(x, z, mode: str) -> np.ndarray:
    if mode == "x_and_z":
        return feature_concat(x, z)
    if mode == "x_only":
        return np.asarray(x, dtype=np.float64)
    if mode == "z_only":
        return np.asarray(z, dtype=np.float64)
    raise ValueError(f"unknown input mode {mode!r}; expected one of {INPUT_MODES}")


def _check_normalized(ds: Dataset, normalizer: Normalizer | None, where: str):
    if normalizer is not None and ds.normalizer_hash is not None and ds.normalizer_hash != normalizer.digest:
        raise ValueError(f"{where}: data was normalised with a different normalizer")
    if normalizer is not None and ds.normalizer_hash is None:
        raise ValueError(f"{where}: data is not normalised; apply the model's normalizer first")


def fit_flow_stage(train: Dataset, config: HybridConfig) -> tuple[FlowModel, dict]:
    flow = build_flow(
        train.d_out, train.d_in, config.flow_layers, config.flow_hidden, config.base_hidden, seed=config.flow_seed
    )
    return train_flow(flow, train.X, train.Y, config.flow_train_config())


def fit_hybrid(train: Dataset, config: HybridConfig | None = None, normalizer: Normalizer | None = None, flow: FlowModel | None = None) -> HybridModel:
    """Stage 1 fits the flow by maximum likelihood; stage 2 fits the predictor
    with MSE on ``[x, f^-1(y | x)]``.

    ``train`` must already be normalised. Passing a trained ``flow`` skips
    stage 1 (used by the input ablation to share one flow across modes).
    """
    config = config or HybridConfig()
    _check_normalized(train, normalizer, "fit_hybrid")
    timings = {}
    t0 = time.perf_counter()
    if flow is None:
        flow, _ = fit_flow_stage(train, config)
    elif (flow.d, flow.c) != (train.d_out, train.d_in):
        raise ValueError(f"fit_hybrid: flow dims (d={flow.d}, c={flow.c}) do not match data ({train.d_out}, {train.d_in})")
    elif config.finetune_flow:
        flow = copy.deepcopy(flow)  # fine-tuning must not mutate a shared flow
    timings["flow_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    z = latent_from_target(flow, train.Y, train.X)
    feats = select_features(train.X, z, config.inputs)
    cfg = config.predictor_train_config()
    best_lr = None
    if config.epistemic == "ensemble":
        predictor = pr.train_ensemble(
            feats, train.Y, cfg, n_members=config.ensemble_members, hidden=config.hidden, head="point", dropout=0.0
        )
    else:
        init = pr.build_predictor(feats.shape[1], train.d_out, config.hidden, "point", config.dropout, seed=config.predictor_seed)
        predictor, best_lr, _ = pr.train_predictor(init, feats, train.Y, cfg)
    timings["predictor_seconds"] = time.perf_counter() - t0
    model = HybridModel(flow, predictor, config, normalizer, best_lr, timings)
    if config.finetune_flow:
        t0 = time.perf_counter()
        finetune(model, train)
        timings["finetune_seconds"] = time.perf_counter() - t0
    return model


def finetune(model: HybridModel, train: Dataset) -> dict:
    """Joint pass: predictor at its selected lr, flow at ``config.finetune_lr``,
    with the latent kept differentiable through the inverse flow."""
    cfg = model.config
    flow, pred = model.flow, model.predictor
    rng = np.random.default_rng([cfg.predictor_seed, 2])
    fit_idx, val_idx = holdout_split(train.n, cfg.val_fraction, rng)
    X, Y = train.X, train.Y

    def loss_on(idx, drop_rng):
        x, y = Tensor(X[idx]), Tensor(Y[idx])
        z, _ = _inverse_t(flow, y, x)
        if cfg.inputs == "x_and_z":
            feats = gt.concat_last_axis([x, z])
        elif cfg.inputs == "z_only":
            feats = z
        else:
            feats = x
        mu, _ = pr.predictor_forward(pred, feats, drop_rng)
        return pr.mse_loss(mu, y)

    groups = [
        (pred.parameters(), adam_init(pred.parameters(), model.best_lr or cfg.lr_grid[0])),
        (flow.parameters(), adam_init(flow.parameters(), cfg.finetune_lr)),
    ]
    return fit_minibatch(
        groups,
        lambda idx: loss_on(fit_idx[idx], rng),
        lambda: float(loss_on(val_idx, None).data),
        len(fit_idx),
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        patience=cfg.patience,
        rng=rng,
        label="finetune",
    )


def predict_with_uncertainty(model: HybridModel, x, seed=0) -> UncertaintyReport:
    """Mean, aleatoric and epistemic variance per row, in target units.

    ``x`` is a normalised :class:`Dataset` (its normalizer is checked against
    the model's) or a raw array already on the model's feature scale. The
    latent at inference is the conditional base mean ``mu_z(x)``.
    """
    if isinstance(x, Dataset):
        if model.normalizer is not None and x.normalizer_hash != model.normalizer.digest:
            raise ValueError("predict_with_uncertainty: input was not normalised with the model's normalizer")
        x = x.X
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.flow.c:
        raise ValueError(f"predict_with_uncertainty: input shape {x.shape}, expected [batch, {model.flow.c}]")
    cfg = model.config
    ss = np.random.SeedSequence(seed)
    flow_seed, pred_seed = ss.spawn(2)
    z = latent_expected(model.flow, x)
    feats = select_features(x, z, cfg.inputs)
    if isinstance(model.predictor, pr.EnsembleModel):
        mean, epistemic, _ = pr.ensemble_predict(model.predictor, feats)
    elif model.predictor.dropout > 0:
        mean, epistemic = pr.mc_dropout_predict(model.predictor, feats, cfg.mc_passes, np.random.default_rng(pred_seed))
    else:
        mean = pr.deterministic_predict(model.predictor, feats)
        epistemic = np.zeros_like(mean)
    aleatoric = aleatoric_variance(model.flow, x, cfg.flow_samples, np.random.default_rng(flow_seed))
    if model.normalizer is not None:
        mean = denormalize_targets(model.normalizer, mean)
        aleatoric = denormalize_targets(model.normalizer, aleatoric, "variances")
        epistemic = denormalize_targets(model.normalizer, epistemic, "variances")
    return UncertaintyReport(mean=mean, aleatoric=aleatoric, epistemic=epistemic)


def input_ablation(train: Dataset, test: Dataset, mode: str, config: HybridConfig | None = None, normalizer: Normalizer | None = None, flow: FlowModel | None = None) -> tuple[HybridModel, UncertaintyReport]:
    """Fit and predict with the predictor restricted to ``mode``'s features.

    Pass the same trained ``flow`` for every mode so that only the predictor
    inputs differ.
    """
    if mode not in INPUT_MODES:
        raise ValueError(f"input_ablation: mode must be one of {INPUT_MODES}, got {mode!r}")
    config = dataclasses.replace(config or HybridConfig(), inputs=mode)
    model = fit_hybrid(train, config, normalizer, flow=flow)
    return model, predict_with_uncertainty(model, test)
