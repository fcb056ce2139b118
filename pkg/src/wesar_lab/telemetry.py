"""Per-step training telemetry: update ratios, norms, spike detection and CSV export."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numcore import fro_norm

PER_TENSOR_FIELDS = ("param_norm", "grad_norm", "update_ratio", "gate")
STEP_FIELDS = ("step", "lr", "loss", "tokens_seen")


def update_ratio(delta: np.ndarray, w: np.ndarray) -> float:
    """``||delta||_F / ||w||_F``; +inf (with a warning) when ``w`` is all zeros."""
    if np.shape(delta) != np.shape(w):
        raise ValueError(f"update shape {np.shape(delta)} does not match parameter {np.shape(w)}")
    wn = fro_norm(w)
    if wn == 0.0:
        warnings.warn("update ratio of a zero-norm parameter", RuntimeWarning, stacklevel=2)
        return math.inf
    return fro_norm(delta) / wn


@dataclass
class TensorStats:
    param_norm: float
    grad_norm: float
    update_ratio: float
    gate: float | None = None


@dataclass
class TelemetryRecord:
    step: int
    lr: float
    loss: float
    tokens_seen: int
    tensors: dict[str, TensorStats] = field(default_factory=dict)


def norms(arrays: dict[str, np.ndarray | None]) -> dict[str, float]:
    return {k: (0.0 if a is None else fro_norm(a)) for k, a in arrays.items()}


def snapshot(step: int, lr: float, loss: float, tokens_seen: int, model, deltas, grad_norms, param_norms) -> TelemetryRecord:
    """Build a record after an optimizer step.

    ``deltas`` are the applied updates keyed by tensor name (post-clip,
    post-decay); ``grad_norms`` are raw pre-clip gradient norms and
    ``param_norms`` are the weight norms before the update, so the ratio is
    ``||dW_t|| / ||W_{t-1}||``.
    """
    rec = TelemetryRecord(step=step, lr=lr, loss=loss, tokens_seen=tokens_seen)
    for name, p in model.params.items():
        gate = None
        if p.gate is not None:
            gate = float(p.gate) if p.gate.ndim == 0 else float(np.mean(p.gate))
        pn = param_norms[name]
        if pn == 0.0:
            warnings.warn(f"update ratio of zero-norm parameter {name}", RuntimeWarning, stacklevel=2)
            ratio = math.inf
        else:
            ratio = fro_norm(deltas[name]) / pn
        rec.tensors[name] = TensorStats(param_norm=pn, grad_norm=grad_norms[name], update_ratio=ratio, gate=gate)
    return rec


# -- spike detection ---------------------------------------------------------


@dataclass
class SpikeDetector:
    window: int = 100
    delta: float = 0.5
    armed_after: int = 100


@dataclass
class SpikeEvent:
    step: int
    loss: float
    trailing_min: float


def detect_spike(losses, detector: SpikeDetector, first_step: int = 1) -> list[SpikeEvent]:
    """Flag step t when its loss exceeds the minimum of the previous ``window`` losses by ``delta``.

    ``losses[i]`` belongs to step ``first_step + i``. Steps at or before
    ``armed_after`` never fire; a window shorter than ``window`` is used near
    the start of the history.
    """
    losses = np.asarray(losses, dtype=np.float64)
    events = []
    for i in range(1, len(losses)):
        step = first_step + i
        if step <= detector.armed_after:
            continue
        prev = losses[max(0, i - detector.window) : i]
        trailing = float(prev.min())
        if losses[i] > trailing + detector.delta:
            events.append(SpikeEvent(step, float(losses[i]), trailing))
    return events


def write_spikes(events: list[SpikeEvent], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss,trailing_min\n")
        for e in events:
            fh.write(f"{e.step},{e.loss:.9g},{e.trailing_min:.9g}\n")


# -- CSV ---------------------------------------------------------------------


def csv_header(tensor_names) -> list[str]:
    cols = list(STEP_FIELDS)
    for name in tensor_names:
        cols.extend(f"{name}.{f}" for f in PER_TENSOR_FIELDS)
    return cols


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{x:.9g}"


def write_csv(records: list[TelemetryRecord], path, tensor_names=None) -> None:
    """One header row, then one row per record; floats carry 9 significant digits."""
    if tensor_names is None:
        tensor_names = list(records[0].tensors) if records else []
    tensor_names = list(tensor_names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(tensor_names))
        for rec in records:
            if list(rec.tensors) != tensor_names:
                raise ValueError(f"record for step {rec.step} has a different tensor set")
            row = [_fmt(rec.step), _fmt(rec.lr), _fmt(rec.loss), _fmt(rec.tokens_seen)]
            for name in tensor_names:
                s = rec.tensors[name]
                row.extend(_fmt(v) for v in (s.param_norm, s.grad_norm, s.update_ratio, s.gate))
            writer.writerow(row)


def read_csv(path) -> tuple[list[str], list[TelemetryRecord]]:
    """Inverse of :func:`write_csv`; returns ``(tensor_names, records)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    names = [c[: -len(".param_norm")] for c in header[len(STEP_FIELDS) :: len(PER_TENSOR_FIELDS)]]
    records = []
    for row in rows[1:]:
        rec = TelemetryRecord(step=int(row[0]), lr=float(row[1]), loss=float(row[2]), tokens_seen=int(row[3]))
        for i, name in enumerate(names):
            base = len(STEP_FIELDS) + i * len(PER_TENSOR_FIELDS)
            pn, gn, ur, gate = row[base : base + 4]
            rec.tensors[name] = TensorStats(float(pn), float(gn), float(ur), float(gate) if gate else None)
        records.append(rec)
    return names, records


def ratio_spread(rec: TelemetryRecord, roles=("W_u", "W_d")) -> float:
    """Worst per-layer max/min of update ratios across the given roles."""
    by_layer: dict[str, list[float]] = {}
    for name, s in rec.tensors.items():
        prefix, _, role = name.rpartition(".")
        if role in roles:
            by_layer.setdefault(prefix, []).append(s.update_ratio)
    worst = 1.0
    for vals in by_layer.values():
        lo = min(vals)
        worst = max(worst, math.inf if lo == 0 else max(vals) / lo)
    return worst
