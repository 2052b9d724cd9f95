"""Versioned ``.npz`` checkpoints for flows, predictors, ensembles and hybrid models.

Each file holds named float/int arrays plus one ``__meta__`` entry with the
JSON metadata (kind, format version, dimensions, config). Parameters are
stored as raw float64 so loading is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .data import Normalizer
from .flow import FlowModel, GaussianBase
from .gradtensor import Tensor
from .hybrid import HybridConfig, HybridModel
from .made import MadeNetwork
from .predictor import EnsembleModel, PredictorModel

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _params(prefix: str, params: dict, arrays: dict):
    for k, t in params.items():
        arrays[f"{prefix}/{k}"] = np.asarray(t.data, dtype=np.float64)


def _load_params(prefix: str, arrays: dict) -> dict[str, Tensor]:
    plen = len(prefix) + 1
    return {k[plen:]: Tensor(arrays[k].copy(), requires_grad=True) for k in arrays if k.startswith(prefix + "/") and "/" not in k[plen:]}


# ---------------------------------------------------------------------------
# per-object encoders


def _encode_flow(flow: FlowModel, prefix: str, arrays: dict) -> dict:
    for k, layer in enumerate(flow.layers):
        p = f"{prefix}/layer{k}"
        arrays[f"{p}.input_degrees"] = layer.input_degrees
        for l, deg in enumerate(layer.hidden_degrees):
            arrays[f"{p}.hidden_degrees{l}"] = deg
        for l, m in enumerate(layer.masks):
            arrays[f"{p}.mask{l}"] = m
        _params(p, layer.params, arrays)
    for k, perm in enumerate(flow.permutations):
        arrays[f"{prefix}.perm{k}"] = np.asarray(perm)
    _params(f"{prefix}/base", flow.base.params, arrays)
    return {"d": flow.d, "c": flow.c, "n_layers": flow.n_layers, "hidden": list(flow.hidden), "base_hidden": flow.base.hidden}


def _decode_flow(meta: dict, prefix: str, arrays: dict) -> FlowModel:
    d, c, hidden = meta["d"], meta["c"], tuple(meta["hidden"])
    layers = []
    for k in range(meta["n_layers"]):
        p = f"{prefix}/layer{k}"
        layers.append(
            MadeNetwork(
                d=d,
                c=c,
                hidden=hidden,
                input_degrees=arrays[f"{p}.input_degrees"].copy(),
                hidden_degrees=[arrays[f"{p}.hidden_degrees{l}"].copy() for l in range(len(hidden))],
                masks=[arrays[f"{p}.mask{l}"].copy() for l in range(len(hidden) + 1)],
                params=_load_params(p, arrays),
            )
        )
    perms = [arrays[f"{prefix}.perm{k}"].copy() for k in range(meta["n_layers"] - 1)]
    base = GaussianBase(d=d, c=c, hidden=meta["base_hidden"], params=_load_params(f"{prefix}/base", arrays))
    return FlowModel(d=d, c=c, layers=layers, permutations=perms, base=base, hidden=hidden)


def _encode_predictor(model: PredictorModel, prefix: str, arrays: dict) -> dict:
    _params(prefix, model.params, arrays)
    return {
        "input_dim": model.input_dim,
        "output_dim": model.output_dim,
        "hidden": list(model.hidden),
        "head": model.head,
        "dropout": model.dropout,
    }


def _decode_predictor(meta: dict, prefix: str, arrays: dict) -> PredictorModel:
    return PredictorModel(
        meta["input_dim"], meta["output_dim"], tuple(meta["hidden"]), meta["head"], meta["dropout"], _load_params(prefix, arrays)
    )


def _encode_ensemble(ens: EnsembleModel, prefix: str, arrays: dict) -> dict:
    return {"members": [_encode_predictor(m, f"{prefix}/m{i}", arrays) for i, m in enumerate(ens.members)]}


def _decode_ensemble(meta: dict, prefix: str, arrays: dict) -> EnsembleModel:
    return EnsembleModel([_decode_predictor(m, f"{prefix}/m{i}", arrays) for i, m in enumerate(meta["members"])])


def _encode_normalizer(norm: Normalizer, arrays: dict) -> dict:
    for name in ("feature_mean", "feature_std", "target_mean", "target_std", "kept_features"):
        arrays[f"normalizer.{name}"] = getattr(norm, name)
    return {"fitted_on": norm.fitted_on, "digest": norm.digest}


def _decode_normalizer(meta: dict, arrays: dict) -> Normalizer:
    fields = {n: arrays[f"normalizer.{n}"].copy() for n in ("feature_mean", "feature_std", "target_mean", "target_std", "kept_features")}
    norm = Normalizer(fitted_on=meta["fitted_on"], **fields)
    if norm.digest != meta["digest"]:
        raise CheckpointError("normalizer digest mismatch after load")
    return norm


def _encode_predictor_any(model, prefix: str, arrays: dict) -> dict:
    if isinstance(model, EnsembleModel):
        return {"kind": "ensemble", **_encode_ensemble(model, prefix, arrays)}
    return {"kind": "predictor", **_encode_predictor(model, prefix, arrays)}


def _decode_predictor_any(meta: dict, prefix: str, arrays: dict):
    if meta["kind"] == "ensemble":
        return _decode_ensemble(meta, prefix, arrays)
    return _decode_predictor(meta, prefix, arrays)


def encode(obj) -> tuple[dict, dict[str, np.ndarray]]:
    """Split a model into JSON-able metadata and a flat array dict."""
    arrays: dict[str, np.ndarray] = {}
    if isinstance(obj, FlowModel):
        meta = {"kind": "flow", "flow": _encode_flow(obj, "flow", arrays)}
    elif isinstance(obj, (PredictorModel, EnsembleModel)):
        inner = _encode_predictor_any(obj, "predictor", arrays)
        meta = {"kind": inner["kind"], "predictor": inner}
    elif isinstance(obj, HybridModel):
        meta = {
            "kind": "hybrid",
            "flow": _encode_flow(obj.flow, "flow", arrays),
            "predictor": _encode_predictor_any(obj.predictor, "predictor", arrays),
            "config": obj.config.to_dict(),
            "best_lr": obj.best_lr,
            "normalizer": None if obj.normalizer is None else _encode_normalizer(obj.normalizer, arrays),
        }
        meta["config_hash"] = hashlib.sha256(json.dumps(meta["config"], sort_keys=True).encode()).hexdigest()
    else:
        raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")
    meta["format_version"] = FORMAT_VERSION
    return meta, arrays


def decode(meta: dict, arrays: dict):
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}; expected {FORMAT_VERSION}")
    kind = meta.get("kind")
    if kind == "flow":
        return _decode_flow(meta["flow"], "flow", arrays)
    if kind in ("predictor", "ensemble"):
        return _decode_predictor_any(meta["predictor"], "predictor", arrays)
    if kind == "hybrid":
        cfg = HybridConfig(**meta["config"])
        norm = None if meta["normalizer"] is None else _decode_normalizer(meta["normalizer"], arrays)
        return HybridModel(
            flow=_decode_flow(meta["flow"], "flow", arrays),
            predictor=_decode_predictor_any(meta["predictor"], "predictor", arrays),
            config=cfg,
            normalizer=norm,
            best_lr=meta["best_lr"],
        )
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def save(obj, path) -> Path:
    meta, arrays = encode(obj)
    path = Path(path)
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=blob, **arrays)
    return path


def load(path):
    try:
        with np.load(Path(path), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing metadata entry")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return decode(meta, arrays)


def checkpoint_digest(obj, part: str | None = None) -> str:
    """SHA-256 over metadata and arrays; ``part`` ("flow" or "predictor")
    restricts it to one stage of a hybrid model."""
    meta, arrays = encode(obj)
    h = hashlib.sha256()
    if part is not None:
        if part not in ("flow", "predictor"):
            raise ValueError(f"checkpoint_digest: part must be 'flow' or 'predictor', got {part!r}")
        meta = meta[part]
        arrays = {k: v for k, v in arrays.items() if k.startswith(part)}
    h.update(json.dumps(meta, sort_keys=True).encode())
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
