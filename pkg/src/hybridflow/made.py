"""Masked autoregressive conditioner (MADE) with an unmasked context input.

For a target of dimension ``d`` the network emits a shift and a log-scale per
dimension. Output ``i`` may only see ``y[:i]`` (plus the context), which is
enforced with binary masks built from unit degrees:

* inputs carry degrees ``1..d``;
* hidden units cycle through ``1..d-1`` (all degree 0 when ``d == 1``, i.e.
  they only see the context);
* a hidden connection exists when ``deg(dst) >= deg(src)``, an output
  connection when ``deg(dst) > deg(src)``.

The context feeds the first hidden layer and, through a zero-initialised skip
weight, every output directly. Without the skip, output 1 would have no path
to the context at all once ``d > 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradtensor as gt
from .gradtensor import Tensor

LOG_SCALE_BOUND = 7.0


@dataclass
class MadeNetwork:
    d: int
    c: int
    hidden: tuple[int, ...]
    input_degrees: np.ndarray
    hidden_degrees: list[np.ndarray]
    masks: list[np.ndarray]
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def output_degrees(self) -> np.ndarray:
        return np.concatenate([self.input_degrees, self.input_degrees])

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def _hidden_degrees(d: int, size: int) -> np.ndarray:
    if d == 1:
        return np.zeros(size, dtype=int)
    return np.arange(size) % (d - 1) + 1


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def build_made(d: int, c: int, hidden=(32,), seed=0) -> MadeNetwork:
    """Build a conditioner for ``d`` targets and ``c`` context features.

    The last layer (masked and context skip) starts at zero, so the layer's
    initial transform is the identity.
    """
    hidden = tuple(int(h) for h in hidden)
    if d < 1:
        raise ValueError(f"build_made: d must be >= 1, got {d}")
    if c < 0:
        raise ValueError(f"build_made: c must be >= 0, got {c}")
    if d > 1 and any(h < d - 1 for h in hidden):
        raise ValueError(f"build_made: hidden sizes {hidden} cannot realise degrees 1..{d - 1}")
    rng = np.random.default_rng(seed)

    in_deg = np.arange(1, d + 1)
    h_degs = [_hidden_degrees(d, h) for h in hidden]
    out_deg = np.concatenate([in_deg, in_deg])

    masks = []
    prev = in_deg
    for deg in h_degs:
        masks.append((deg[:, None] >= prev[None, :]).astype(np.float64))
        prev = deg
    masks.append((out_deg[:, None] > prev[None, :]).astype(np.float64))

    params: dict[str, Tensor] = {}
    fan_prev = d
    for l, h in enumerate(hidden):
        fan_in = fan_prev + (c if l == 0 else 0)
        params[f"W{l}"] = Tensor(_uniform(rng, (h, fan_prev), fan_in), requires_grad=True)
        params[f"b{l}"] = Tensor(rng.uniform(-1.0, 1.0, size=h) / np.sqrt(max(fan_in, 1)), requires_grad=True)
        if l == 0 and c > 0:
            params["C0"] = Tensor(_uniform(rng, (h, c), fan_in), requires_grad=True)
        fan_prev = h
    params["Wout"] = Tensor(np.zeros((2 * d, fan_prev)), requires_grad=True)
    params["bout"] = Tensor(np.zeros(2 * d), requires_grad=True)
    if c > 0:
        params["Cout"] = Tensor(np.zeros((2 * d, c)), requires_grad=True)

    return MadeNetwork(d=d, c=c, hidden=hidden, input_degrees=in_deg, hidden_degrees=h_degs, masks=masks, params=params)


def made_forward(net: MadeNetwork, y, ctx) -> tuple[Tensor, Tensor]:
    """Return ``(shift, log_scale)``, each ``[batch, d]``; log-scale clamped to +-7."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    ctx = ctx if isinstance(ctx, Tensor) else Tensor(ctx)
    if y.data.ndim != 2 or y.shape[1] != net.d:
        raise ValueError(f"made_forward: y has shape {y.shape}, expected [batch, {net.d}]")
    if ctx.data.ndim != 2 or ctx.shape[1] != net.c or ctx.shape[0] != y.shape[0]:
        raise ValueError(f"made_forward: ctx has shape {ctx.shape}, expected [{y.shape[0]}, {net.c}]")
    p = net.params
    h = y
    for l in range(len(net.hidden)):
        pre = gt.masked_linear(h, p[f"W{l}"], net.masks[l], p[f"b{l}"])
        if l == 0 and net.c > 0:
            pre = gt.add(pre, gt.masked_linear(ctx, p["C0"]))
        h = gt.tanh(pre)
    out = gt.masked_linear(h, p["Wout"], net.masks[-1], p["bout"])
    if net.c > 0:
        out = gt.add(out, gt.masked_linear(ctx, p["Cout"]))
    shift = gt.slice_last_axis(out, 0, net.d)
    log_scale = gt.clip(gt.slice_last_axis(out, net.d, 2 * net.d), -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
    return shift, log_scale
