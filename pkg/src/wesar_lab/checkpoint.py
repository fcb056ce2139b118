"""Checkpoint files: a UTF-8 text manifest followed by raw little-endian float64 arrays.

Manifest lines are ``key = value`` settings, then one ``tensor`` line per
parameter, then ``end``. The binary section holds, per tensor in manifest order:
the weight, the gate (if any), and for sigma-reparam tensors ``u``, ``v`` and
the frozen spectral estimate. Floats in the manifest use ``repr`` so a
load/save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from .errors import InputError
from .model import ModelConfig, TransformerLM
from .params import PowerIterState, ReparamMode

MAGIC = "wesar-lab checkpoint 1"


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def _value_str(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def save_checkpoint(model: TransformerLM, path) -> None:
    lines = [MAGIC]
    for f in fields(ModelConfig):
        lines.append(f"model.{f.name} = {_value_str(getattr(model.config, f.name))}")
    lines.append(f"reparam.kind = {model.reparam.kind}")
    lines.append(f"reparam.sigma_sq = {_value_str(float(model.reparam.sigma_sq))}")
    lines.append(f"reparam.fixed_gate = {_value_str(bool(model.reparam.fixed_gate))}")
    lines.append(f"embed_scale = {_value_str(float(model.embed_scale))}")
    blobs = []
    for name, p in model.params.items():
        layer = "-" if p.layer is None else str(p.layer)
        gate = "none" if p.gate is None else _shape_str(p.gate.shape)
        gate_value = repr(float(p.gate)) if p.gate is not None and p.gate.ndim == 0 else "-"
        power = "yes" if p.power is not None else "no"
        lines.append(
            f"tensor {name} role={p.role} layer={layer} shape={_shape_str(p.weight.shape)} "
            f"gate={gate} gate_value={gate_value} trainable_gate={_value_str(bool(p.gate_trainable))} power={power}"
        )
        blobs.append(p.weight)
        if p.gate is not None:
            blobs.append(p.gate)
        if p.power is not None:
            blobs.extend([p.power.u, p.power.v, np.array(p.power.estimate)])
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _coerce(text: str, like):
    if isinstance(like, bool):
        return text == "true"
    if isinstance(like, int):
        return int(text)
    return float(text)


def load_checkpoint(path) -> TransformerLM:
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise InputError(f"{path} is not a checkpoint file")
    header = raw[: cut + 1].decode("utf-8").splitlines()[1:]
    body = memoryview(raw)[cut + len(marker) :]

    settings, tensors = {}, []
    for line in header:
        if line.startswith("tensor "):
            parts = line.split()
            entry = dict(kv.split("=", 1) for kv in parts[2:])
            entry["name"] = parts[1]
            tensors.append(entry)
        else:
            key, _, value = line.partition(" = ")
            settings[key.strip()] = value.strip()

    try:
        cfg, mode = _configs(settings)
    except (KeyError, ValueError) as exc:
        raise InputError(f"checkpoint {path} has a malformed manifest: {exc}") from None
    model = TransformerLM(cfg, mode)
    model.embed_scale = float(settings["embed_scale"])
    return _fill(model, tensors, body, path)


def _configs(settings):
    defaults = ModelConfig()
    cfg = ModelConfig(**{f.name: _coerce(settings[f"model.{f.name}"], getattr(defaults, f.name)) for f in fields(ModelConfig)})
    mode = ReparamMode(
        kind=settings["reparam.kind"],
        sigma_sq=float(settings["reparam.sigma_sq"]),
        fixed_gate=settings["reparam.fixed_gate"] == "true",
    )
    return cfg, mode


def _fill(model, tensors, body, path):
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(body):
            raise InputError(f"checkpoint {path} is truncated")
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
        return arr

    if sorted(e["name"] for e in tensors) != sorted(model.params):
        raise InputError(f"checkpoint {path} does not list every tensor of its model config")
    for entry in tensors:
        p = model.params[entry["name"]]
        p.weight = take(_parse_shape(entry["shape"]))
        p.gate = None if entry["gate"] == "none" else take(_parse_shape(entry["gate"]))
        p.gate_trainable = entry["trainable_gate"] == "true"
        if entry["power"] == "yes":
            u = take((p.weight.shape[0],))
            v = take((p.weight.shape[1],))
            p.power = PowerIterState(u=u, v=v, estimate=float(take(())))
    if offset != len(body):
        raise InputError(f"checkpoint {path} has {len(body) - offset} trailing bytes")
    model.zero_grad()
    return model
