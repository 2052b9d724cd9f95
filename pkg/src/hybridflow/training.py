"""Minibatch Adam loop with early stopping, shared by the flow and predictors."""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from .gradtensor import AdamState, Tape, Tensor, adam_step

log = logging.getLogger(__name__)


def holdout_split(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random (fit, validation) index split; validation gets at least one row."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"validation fraction must be in (0, 1), got {fraction}")
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise ValueError(f"cannot hold out {n_val} of {n} rows for validation")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_minibatch(
    groups: Sequence[tuple[Sequence[Tensor], AdamState]],
    batch_loss: Callable[[np.ndarray], Tensor],
    val_loss: Callable[[], float],
    n_train: int,
    *,
    epochs: int,
    batch_size: int,
    patience: int,
    rng: np.random.Generator,
    label: str = "training",
) -> dict[str, list[float]]:
    """Train until ``patience`` epochs pass without a new best validation loss.

    ``groups`` pairs parameter lists with their own optimiser state so that
    parts of a model can move at different learning rates. The parameters of
    the best validation epoch are restored on return.
    """
    params = [p for ps, _ in groups for p in ps]
    history: dict[str, list[float]] = {"train": [], "val": []}
    best = val_loss()
    if not np.isfinite(best):
        raise FloatingPointError(f"{label}: non-finite validation loss before training")
    best_state = [p.data.copy() for p in params]
    since_best = 0
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n_train, batch_size)):
            idx = order[start : start + batch_size]
            with Tape() as tape:
                loss = batch_loss(idx)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"{label}: non-finite loss at epoch {epoch}, batch {b}")
            grads = tape.backward(loss, params)
            for ps, state in groups:
                adam_step(ps, [grads[p.node_id] for p in ps], state)
            total += value * len(idx)
            seen += len(idx)
        v = val_loss()
        if not np.isfinite(v):
            raise FloatingPointError(f"{label}: non-finite validation loss at epoch {epoch}")
        history["train"].append(total / seen)
        history["val"].append(v)
        if v < best:
            best = v
            best_state = [p.data.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                log.debug("%s: early stop at epoch %d (best %.5f)", label, epoch, best)
                break
    for p, saved in zip(params, best_state):
        p.data = saved
    history["best_val"] = [best]
    return history
