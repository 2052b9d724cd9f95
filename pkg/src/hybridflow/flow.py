"""Conditional masked autoregressive flow with a conditional diagonal Gaussian base.

Generative direction (``z -> y``) is sequential over target dimensions; the
density direction (``y -> z``) needs one conditioner pass per layer. Layers are
stored in density order: ``layers[0]`` is applied first to ``y``, with the
order of the target dimensions reversed between consecutive layers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradtensor as gt
from .gradtensor import Tensor, adam_init
from .made import LOG_SCALE_BOUND, MadeNetwork, build_made, made_forward
from .training import fit_minibatch, holdout_split

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class GaussianBase:
    """Maps context ``x`` to ``(mu_z(x), log_sigma_z(x))`` through one tanh layer."""

    d: int
    c: int
    hidden: int
    params: dict[str, Tensor] = field(default_factory=dict)

    def __call__(self, ctx) -> tuple[Tensor, Tensor]:
        ctx = ctx if isinstance(ctx, Tensor) else Tensor(ctx)
        p = self.params
        h = gt.tanh(gt.masked_linear(ctx, p["W0"], None, p["b0"]))
        out = gt.masked_linear(h, p["W1"], None, p["b1"])
        mu = gt.slice_last_axis(out, 0, self.d)
        log_sigma = gt.clip(gt.slice_last_axis(out, self.d, 2 * self.d), -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        return mu, log_sigma

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def build_base(d: int, c: int, hidden: int = 32, seed=0) -> GaussianBase:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(max(c, 1))
    params = {
        "W0": Tensor(rng.uniform(-bound, bound, size=(hidden, c)), requires_grad=True),
        "b0": Tensor(rng.uniform(-bound, bound, size=hidden), requires_grad=True),
        # zero head: the base starts as a standard normal for every context
        "W1": Tensor(np.zeros((2 * d, hidden)), requires_grad=True),
        "b1": Tensor(np.zeros(2 * d), requires_grad=True),
    }
    return GaussianBase(d=d, c=c, hidden=hidden, params=params)


@dataclass
class FlowModel:
    d: int
    c: int
    layers: list[MadeNetwork]
    permutations: list[np.ndarray]
    base: GaussianBase
    hidden: tuple[int, ...] = (32,)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend(self.base.parameters())
        return params


@dataclass
class FlowTrainConfig:
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 20
    val_fraction: float = 0.1
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.patience) < 1 or self.lr <= 0:
            raise ValueError(f"FlowTrainConfig: epochs, batch_size, patience and lr must be positive: {self}")
        if not 0.0 < self.val_fraction <= 0.5:
            raise ValueError(f"FlowTrainConfig: val_fraction must be in (0, 0.5], got {self.val_fraction}")


def build_flow(d: int, c: int, n_layers: int = 5, hidden=(32,), base_hidden: int = 32, seed=0) -> FlowModel:
    """Identity-initialised flow: every layer and the base head start at zero."""
    if n_layers < 1:
        raise ValueError(f"build_flow: need at least one layer, got {n_layers}")
    seeds = np.random.SeedSequence(seed).spawn(n_layers + 1)
    layers = [build_made(d, c, hidden, seed=np.random.default_rng(s)) for s in seeds[:n_layers]]
    reverse = np.arange(d)[::-1].copy()
    perms = [reverse.copy() for _ in range(n_layers - 1)]
    base = build_base(d, c, base_hidden, seed=np.random.default_rng(seeds[-1]))
    return FlowModel(d=d, c=c, layers=layers, permutations=perms, base=base, hidden=tuple(hidden))


def _as2d(a, width: int, name: str) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, width) if width else a.reshape(-1, 0)
    if a.ndim != 2 or a.shape[1] != width:
        raise ValueError(f"{name}: expected [batch, {width}], got {a.shape}")
    return a


# ---------------------------------------------------------------------------
# single layer


def _layer_inverse_t(layer: MadeNetwork, y: Tensor, ctx: Tensor) -> tuple[Tensor, Tensor]:
    shift, log_scale = made_forward(layer, y, ctx)
    z = gt.mul(gt.sub(y, shift), gt.exp(gt.neg(log_scale)))
    return z, gt.neg(gt.reduce_sum(log_scale, axis=-1))


def layer_inverse(layer: MadeNetwork, y, ctx) -> tuple[np.ndarray, np.ndarray]:
    """``z = (y - shift) * exp(-log_scale)`` in one pass; returns ``(z, logdet_inv)``."""
    y = _as2d(y, layer.d, "layer_inverse")
    ctx = _as2d(ctx, layer.c, "layer_inverse")
    z, ld = _layer_inverse_t(layer, Tensor(y), Tensor(ctx))
    if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(ld.data))):
        raise FloatingPointError("layer_inverse: non-finite output")
    return z.data, ld.data


def layer_forward(layer: MadeNetwork, z, ctx) -> np.ndarray:
    """Sequential generation ``y_i = z_i * exp(log_scale_i) + shift_i``, one pass per dimension."""
    z = _as2d(z, layer.d, "layer_forward")
    ctx = _as2d(ctx, layer.c, "layer_forward")
    if z.shape[0] != ctx.shape[0]:
        raise ValueError(f"layer_forward: batch mismatch {z.shape} vs {ctx.shape}")
    y = np.zeros_like(z)
    for i in range(layer.d):
        shift, log_scale = made_forward(layer, y, ctx)
        y[:, i] = z[:, i] * np.exp(log_scale.data[:, i]) + shift.data[:, i]
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("layer_forward: non-finite output")
    return y


# ---------------------------------------------------------------------------
# full stack


def _inverse_t(flow: FlowModel, y: Tensor, ctx: Tensor, check: bool = False) -> tuple[Tensor, Tensor]:
    h, total = y, None
    for k, layer in enumerate(flow.layers):
        h, ld = _layer_inverse_t(layer, h, ctx)
        if check and not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(ld.data))):
            raise FloatingPointError(f"log_prob: non-finite value after flow layer {k}")
        total = ld if total is None else gt.add(total, ld)
        if k < flow.n_layers - 1:
            h = gt.permute_last_axis(h, flow.permutations[k])
    return h, total


def _base_log_prob_t(flow: FlowModel, z: Tensor, ctx: Tensor) -> Tensor:
    mu, log_sigma = flow.base(ctx)
    u = gt.mul(gt.sub(z, mu), gt.exp(gt.neg(log_sigma)))
    per_dim = gt.sub(gt.mul(-0.5, gt.mul(u, u)), gt.add(log_sigma, HALF_LOG_2PI))
    return gt.reduce_sum(per_dim, axis=-1)


def _log_prob_t(flow: FlowModel, y: Tensor, ctx: Tensor, check: bool = False) -> Tensor:
    z, logdet = _inverse_t(flow, y, ctx, check=check)
    lp = gt.add(_base_log_prob_t(flow, z, ctx), logdet)
    if check and not np.all(np.isfinite(lp.data)):
        raise FloatingPointError("log_prob: non-finite base log-density")
    return lp


def log_prob(flow: FlowModel, y, ctx) -> np.ndarray:
    """Exact conditional log-density ``log p(y | x)`` per row."""
    y = _as2d(y, flow.d, "log_prob")
    ctx = _as2d(ctx, flow.c, "log_prob")
    if y.shape[0] != ctx.shape[0]:
        raise ValueError(f"log_prob: batch mismatch {y.shape} vs {ctx.shape}")
    return _log_prob_t(flow, Tensor(y), Tensor(ctx), check=True).data


def latent_from_target(flow: FlowModel, y, ctx) -> np.ndarray:
    """Full inverse pass ``z = f^-1(y | x)``."""
    y = _as2d(y, flow.d, "latent_from_target")
    ctx = _as2d(ctx, flow.c, "latent_from_target")
    if y.shape[0] != ctx.shape[0]:
        raise ValueError(f"latent_from_target: batch mismatch {y.shape} vs {ctx.shape}")
    z, _ = _inverse_t(flow, Tensor(y), Tensor(ctx), check=True)
    return z.data


def forward(flow: FlowModel, z, ctx) -> np.ndarray:
    """Generative map ``y = f(z | x)``."""
    h = _as2d(z, flow.d, "forward")
    ctx = _as2d(ctx, flow.c, "forward")
    for k in range(flow.n_layers - 1, -1, -1):
        if k < flow.n_layers - 1:
            inv = np.argsort(flow.permutations[k])
            h = h[:, inv]
        h = layer_forward(flow.layers[k], h, ctx)
    return h


def latent_expected(flow: FlowModel, ctx) -> np.ndarray:
    """Mean of the conditional base, i.e. the exact expectation of ``z`` given ``x``."""
    ctx = _as2d(ctx, flow.c, "latent_expected")
    mu, _ = flow.base(ctx)
    return mu.data


def sample(flow: FlowModel, ctx, n: int, seed=0) -> np.ndarray:
    """Draw ``n`` targets per context row.

    A single context (1-D, or one row) gives ``[n, d]``; ``m`` rows give
    ``[m, n, d]``. ``seed`` is an int or any object with ``standard_normal(shape)``.
    """
    if n < 1:
        raise ValueError(f"sample: n must be >= 1, got {n}")
    single = np.ndim(ctx) == 1 or (np.ndim(ctx) == 2 and np.shape(ctx)[0] == 1)
    ctx = _as2d(ctx, flow.c, "sample")
    m = ctx.shape[0]
    rng = seed if hasattr(seed, "standard_normal") else np.random.default_rng(seed)
    tiled = np.repeat(ctx, n, axis=0)
    mu, log_sigma = flow.base(tiled)
    eps = rng.standard_normal((m * n, flow.d))
    z = mu.data + np.exp(log_sigma.data) * eps
    y = forward(flow, z, tiled).reshape(m, n, flow.d)
    return y[0] if single else y


def aleatoric_variance(flow: FlowModel, ctx, n_samples: int = 100, seed=0) -> np.ndarray:
    """Unbiased variance of ``n_samples`` flow draws, per context row and target dim."""
    if n_samples < 2:
        raise ValueError(f"aleatoric_variance: need at least 2 samples, got {n_samples}")
    ctx = _as2d(ctx, flow.c, "aleatoric_variance")
    draws = sample(flow, ctx, n_samples, seed)
    if draws.ndim == 2:
        draws = draws[None]
    return draws.var(axis=1, ddof=1)


def train_flow(flow: FlowModel, x, y, cfg: FlowTrainConfig | None = None) -> tuple[FlowModel, dict]:
    """Minimise mean negative log-likelihood with Adam and early stopping.

    Trains ``flow`` in place on (normalised) data and returns it with the loss
    history; the best-validation parameters are restored.
    """
    cfg = cfg or FlowTrainConfig()
    x = _as2d(x, flow.c, "train_flow")
    y = _as2d(y, flow.d, "train_flow")
    rng = np.random.default_rng(cfg.seed)
    fit_idx, val_idx = holdout_split(len(y), cfg.val_fraction, rng)
    xf, yf = Tensor(x[fit_idx]), Tensor(y[fit_idx])
    xv, yv = Tensor(x[val_idx]), Tensor(y[val_idx])
    params = flow.parameters()
    state = adam_init(params, cfg.lr, weight_decay=cfg.weight_decay)

    def batch_loss(idx):
        lp = _log_prob_t(flow, Tensor(yf.data[idx]), Tensor(xf.data[idx]))
        return gt.neg(gt.reduce_mean(lp))

    def val_loss():
        return float(-np.mean(_log_prob_t(flow, yv, xv).data))

    history = fit_minibatch(
        [(params, state)],
        batch_loss,
        val_loss,
        len(fit_idx),
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        patience=cfg.patience,
        rng=rng,
        label="train_flow",
    )
    return flow, history
