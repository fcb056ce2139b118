"""scikit-learn style wrapper around the byte-level training loop."""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .trainer import eval_nll, run_training, split_bytes
from .validation import check_byte_stream, check_contexts


class ByteLM(BaseEstimator):
    """Byte-level Pre-LN Transformer trained with a chosen reparameterization.

    ``fit`` takes a byte stream (bytes, str, path or uint8 array). ``predict``
    and ``predict_proba`` take token contexts of shape (n, t) and return the
    next byte after each context. ``score`` is the negative mean NLL of a byte
    stream, so larger is better.

    Examples
    --------
    >>> lm = ByteLM(d=16, n_layers=1, n_heads=2, ctx=16, batch_tokens=64, total_steps=2, warmup=1)
    >>> lm.fit(b"abcabcabc" * 40).predict([[97, 98]]).shape
    (1,)
    """

    def __init__(self, d=64, n_layers=4, n_heads=4, ctx=256, reparam="wesar", init_scheme=None, sigma_sq=4e-5,
                 lr=1e-3, warmup=100, total_steps=2000, batch_tokens=8192, weight_decay=0.01, z_coeff=1e-4, seed=0):
        self.d = d
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ctx = ctx
        self.reparam = reparam
        self.init_scheme = init_scheme
        self.sigma_sq = sigma_sq
        self.lr = lr
        self.warmup = warmup
        self.total_steps = total_steps
        self.batch_tokens = batch_tokens
        self.weight_decay = weight_decay
        self.z_coeff = z_coeff
        self.seed = seed

    def run_config(self) -> RunConfig:
        values = {
            "model.d": self.d, "model.n_layers": self.n_layers, "model.n_heads": self.n_heads, "model.ctx": self.ctx,
            "reparam.kind": self.reparam, "reparam.sigma_sq": self.sigma_sq, "optim.lr": self.lr,
            "optim.warmup": self.warmup, "optim.total_steps": self.total_steps,
            "optim.batch_tokens": self.batch_tokens, "optim.weight_decay": self.weight_decay,
            "optim.z_coeff": self.z_coeff, "run.seed": self.seed, "telemetry.stride": 1,
        }
        if self.init_scheme is not None:
            values["init.scheme"] = self.init_scheme
        return RunConfig.from_values(values)

    def fit(self, X, y=None):
        cfg = self.run_config()
        data = check_byte_stream(X, min_len=cfg.model.ctx + 1)
        result = run_training(cfg, split_bytes(data, 0.0))
        self.model_ = result.model
        self.losses_ = np.asarray(result.losses)
        self.telemetry_ = result.records
        self.spikes_ = result.spikes
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        tokens = check_contexts(X, self.model_.config.vocab, self.model_.config.ctx)
        return softmax(self.model_.logits(tokens)[:, -1, :], axis=-1)

    def predict_log_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        tokens = check_contexts(X, self.model_.config.vocab, self.model_.config.ctx)
        return log_softmax(self.model_.logits(tokens)[:, -1, :], axis=-1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "model_")
        data = check_byte_stream(X, min_len=self.model_.config.ctx + 1)
        return -eval_nll(self.model_, data)

    def perplexity(self, X) -> float:
        return float(np.exp(-self.score(X)))
