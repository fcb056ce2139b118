"""Byte-level corpus handling, the training loop and held-out perplexity."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import reparam, telemetry
from .checkpoint import save_checkpoint
from .config import RunConfig
from .errors import ConfigError, DivergedError, InputError
from .initializers import initialize_model
from .model import TransformerLM
from .numcore import Rng
from .optim import Adam, clip_global, lr_at

log = logging.getLogger(__name__)

EVAL_BATCH = 16


@dataclass
class Corpus:
    train: np.ndarray
    heldout: np.ndarray

    @property
    def vocab(self) -> int:
        return 256


def split_bytes(data: bytes | np.ndarray, heldout_fraction: float) -> Corpus:
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data.astype(np.uint8)
    if not 0.0 <= heldout_fraction < 1.0:
        raise ConfigError("heldout fraction must lie in [0, 1)")
    n_held = int(round(len(arr) * heldout_fraction))
    cut = len(arr) - n_held
    return Corpus(train=arr[:cut], heldout=arr[cut:])


def load_corpus(path, heldout_fraction: float = 0.1, seed: int = 0, ctx: int | None = None) -> Corpus:
    """Read ``path`` as raw bytes and hold out its trailing ``heldout_fraction``.

    The split is contiguous, so it is identical for every seed; ``seed`` is
    accepted for interface symmetry with batch sampling.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"corpus {path} does not exist")
    data = path.read_bytes()
    if not data:
        raise InputError(f"corpus {path} is empty")
    if ctx is not None and len(data) < 10 * ctx:
        raise InputError(f"corpus {path} has {len(data)} bytes; need at least 10*ctx = {10 * ctx}")
    return split_bytes(data, heldout_fraction)


def next_batch(data: np.ndarray, ctx: int, batch_tokens: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``batch_tokens // ctx`` windows at uniform offsets (with replacement)."""
    if batch_tokens % ctx:
        raise ConfigError(f"batch_tokens={batch_tokens} is not a multiple of ctx={ctx}")
    if len(data) < ctx + 1:
        raise InputError(f"need at least ctx+1 = {ctx + 1} training bytes, have {len(data)}")
    n_seq = batch_tokens // ctx
    offsets = rng.integers(0, len(data) - ctx, size=n_seq)
    idx = offsets[:, None] + np.arange(ctx + 1)[None, :]
    window = data[idx].astype(np.int64)
    return window[:, :-1], window[:, 1:]


def build_model(cfg: RunConfig) -> TransformerLM:
    model = TransformerLM(cfg.model, cfg.reparam)
    initialize_model(model, cfg.init, Rng(cfg.seed).child("init"))
    return model


@dataclass
class TrainResult:
    model: TransformerLM
    losses: list[float]
    records: list[telemetry.TelemetryRecord] = field(default_factory=list)
    spikes: list[telemetry.SpikeEvent] = field(default_factory=list)
    diverged: bool = False
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def run_training(cfg: RunConfig, corpus: Corpus, model: TransformerLM | None = None, progress_every: int = 0) -> TrainResult:
    """Train in memory; raises DivergedError on a non-finite loss or gradient."""
    if model is None:
        model = build_model(cfg)
    if model.config.vocab < 256:
        raise ConfigError("byte corpora need model.vocab >= 256")
    opt = Adam(cfg.optim)
    data_rng = Rng(cfg.seed).child("data")
    result = TrainResult(model=model, losses=[])
    tokens_seen = 0
    start = time.perf_counter()
    stride = cfg.telemetry_stride
    for step in range(1, cfg.optim.total_steps + 1):
        lr = lr_at(step, cfg.optim)
        reparam.refresh_spectral_estimates(model)
        tokens, targets = next_batch(corpus.train, cfg.model.ctx, cfg.optim.batch_tokens, data_rng)
        model.zero_grad()
        loss, cache = model.forward_loss(tokens, targets, cfg.optim.z_coeff)
        if not math.isfinite(loss):
            result.diverged = True
            _dump_tail(result.records)
            raise DivergedError(f"loss became {loss} at step {step}")
        model.backward(cache)
        del cache
        record = stride > 0 and step % stride == 0
        if record:
            grad_norms = telemetry.norms({n: p.grad_weight for n, p in model.params.items()})
            param_norms = telemetry.norms({n: p.weight for n, p in model.params.items()})
        try:
            clip_global(opt.grads(model), cfg.optim.clip_threshold)
        except DivergedError:
            result.diverged = True
            _dump_tail(result.records)
            raise
        deltas = opt.step(model, lr)
        tokens_seen += tokens.size
        result.losses.append(loss)
        if record:
            result.records.append(telemetry.snapshot(step, lr, loss, tokens_seen, model, deltas, grad_norms, param_norms))
        if progress_every and step % progress_every == 0:
            log.info("step %d lr %.3g loss %.4f (%.1fs)", step, lr, loss, time.perf_counter() - start)
    result.seconds = time.perf_counter() - start
    result.spikes = telemetry.detect_spike(result.losses, cfg.spike)
    return result


def _dump_tail(records, n: int = 5) -> None:
    for rec in records[-n:]:
        worst = max(rec.tensors.items(), key=lambda kv: kv[1].update_ratio)
        log.error("step %d loss %.5g lr %.3g largest update ratio %s=%.3g", rec.step, rec.loss, rec.lr, worst[0], worst[1].update_ratio)


def train(cfg: RunConfig, progress_every: int = 100) -> TrainResult:
    """Full run from a config: load data, train, write checkpoint, telemetry CSV and spikes sidecar."""
    if cfg.data_path is None:
        raise ConfigError("data.path is required for training")
    corpus = load_corpus(cfg.data_path, cfg.heldout_fraction, cfg.seed, cfg.model.ctx)
    result = run_training(cfg, corpus, progress_every=progress_every)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Path(cfg.checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, cfg.checkpoint_path)
    Path(cfg.csv_path).parent.mkdir(parents=True, exist_ok=True)
    telemetry.write_csv(result.records, cfg.csv_path, tensor_names=list(result.model.params))
    telemetry.write_spikes(result.spikes, Path(cfg.csv_path).parent / "spikes.txt")
    return result


def eval_nll(model: TransformerLM, data: np.ndarray, batch: int = EVAL_BATCH) -> float:
    """Mean next-token NLL over non-overlapping ``ctx``-token windows of ``data``."""
    ctx = model.config.ctx
    n_windows = (len(data) - 1) // ctx
    if n_windows < 1:
        raise InputError(f"held-out data has {len(data)} bytes; need at least ctx+1 = {ctx + 1}")
    data = np.asarray(data).astype(np.int64)
    total, count = 0.0, 0
    for lo in range(0, n_windows, batch):
        hi = min(n_windows, lo + batch)
        starts = np.arange(lo, hi) * ctx
        idx = starts[:, None] + np.arange(ctx + 1)[None, :]
        window = data[idx]
        _, cache = model.forward_loss(window[:, :-1], window[:, 1:], z_coeff=0.0)
        n = window[:, 1:].size
        total += cache.ce * n
        count += n
    return total / count


def eval_perplexity(model: TransformerLM, data: np.ndarray) -> float:
    return math.exp(eval_nll(model, data))
