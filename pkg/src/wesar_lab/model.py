"""Pre-LN Transformer decoder with an exact hand-written backward pass.

Layout: embedding (times ``embed_scale``), N blocks of
``x + r*Attn(RMSNorm(x))`` and ``x + r*FFN(RMSNorm(x))``, a final RMSNorm and
an untied prediction head. ``r`` is 1 except under the residual-scaling
reparameterization. Attention is causal multi-head with RoPE; the FFN is
``W_d gelu(W_u x)`` with exact (erf) gelu. No biases, no dropout.

Weights are stored ``(d_out, d_in)`` and applied as ``x @ W.T``, except the
embedding which is a ``(vocab, d)`` lookup table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import reparam
from .errors import ConfigError, InputError, StaleCacheError
from .params import GAMMA_ROLE, ParamTensor, ReparamMode

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
ATTN_BLOCK = 32


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab: int = 256
    ctx: int = 256
    ffn_mult: int = 4
    rmsnorm_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("d", "n_layers", "n_heads", "vocab", "ctx", "ffn_mult"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be a positive integer")
        if self.d % self.n_heads:
            raise ConfigError(f"model.d={self.d} is not divisible by model.n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head dimension, got {self.head_dim}")
        if self.rmsnorm_eps < 0:
            raise ConfigError("model.rmsnorm_eps must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_mult * self.d

    def shapes(self) -> dict[str, tuple[str, int | None, tuple[int, ...]]]:
        """Ordered ``name -> (role, layer, shape)`` for every parameter."""
        d, h = self.d, self.ffn_hidden
        out = {"W_e": ("W_e", None, (self.vocab, d))}
        for i in range(self.n_layers):
            out[f"layer{i}.gamma_LN_attn"] = (GAMMA_ROLE, i, (d,))
            for role in ("W_q", "W_k", "W_v", "W_o"):
                out[f"layer{i}.{role}"] = (role, i, (d, d))
            out[f"layer{i}.gamma_LN_ffn"] = (GAMMA_ROLE, i, (d,))
            out[f"layer{i}.W_u"] = ("W_u", i, (h, d))
            out[f"layer{i}.W_d"] = ("W_d", i, (d, h))
        out["gamma_LN_final"] = (GAMMA_ROLE, None, (d,))
        out["W_p"] = ("W_p", None, (self.vocab, d))
        return out


# -- elementwise pieces ------------------------------------------------------------


def rmsnorm_forward(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """``gamma * x / sqrt(mean(x^2) + eps)`` over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ConfigError("rmsnorm of a zero-length vector")
    s = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gamma * (x * s)


def rmsnorm_backward(x: np.ndarray, gamma: np.ndarray, dy: np.ndarray, eps: float = 1e-5):
    """Return ``(dx, dgamma)``; ``dgamma`` is summed over all leading axes."""
    x = np.asarray(x, dtype=np.float64)
    s = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * s
    gy = dy * gamma
    dx = s * (gy - xhat * np.mean(gy * xhat, axis=-1, keepdims=True))
    dgamma = np.sum((dy * xhat).reshape(-1, x.shape[-1]), axis=0)
    return dx, dgamma


def gelu(u: np.ndarray) -> np.ndarray:
    return u * ndtr(u)


def gelu_grad(u: np.ndarray) -> np.ndarray:
    return ndtr(u) + u * np.exp(-0.5 * u * u) * _INV_SQRT_2PI


def rope_tables(t: int, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(t, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles)] * 2, axis=1)
    sin = np.concatenate([np.sin(angles)] * 2, axis=1)
    return cos, sin


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return x * cos + _rotate_half(x) * sin


def rope_backward(dy: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # transpose of the rotation
    return dy * cos - _rotate_half(dy * sin)


def causal_mask(t: int) -> np.ndarray:
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, 1)] = -np.inf
    return mask


# -- sublayers ---------------------------------------------------------------------


def _query_blocks(t: int, block: int):
    return [(lo, min(lo + block, t)) for lo in range(0, t, block)]


def attention_forward(h, wq, wk, wv, wo, n_heads: int, cos, sin, mask=None, block: int = ATTN_BLOCK):
    """Causal multi-head self-attention on ``h`` of shape (B, T, d).

    Queries are processed in blocks that only see keys up to the block end, so
    fully masked score tiles are never formed. Returns ``(out, cache)``;
    ``cache["p"]`` holds one probability tile (B, H, block, key_end) per block.
    """
    b, t, d = h.shape
    hd = d // n_heads
    h2 = h.reshape(b * t, d)
    if mask is None:
        mask = causal_mask(t)

    def heads(z):
        return np.ascontiguousarray(z.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3))

    scale = 1.0 / math.sqrt(hd)
    q = rope_apply(heads(h2 @ wq.T), cos, sin)
    k = rope_apply(heads(h2 @ wk.T), cos, sin)
    v = heads(h2 @ wv.T)
    qs = q * scale
    kt = k.transpose(0, 1, 3, 2)
    o = np.empty((b, n_heads, t, hd))
    probs = []
    for lo, hi in _query_blocks(t, block):
        s = qs[:, :, lo:hi] @ kt[..., :hi]
        s += mask[lo:hi, :hi]
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        o[:, :, lo:hi] = s @ v[:, :, :hi]
        probs.append(s)
    o = o.transpose(0, 2, 1, 3).reshape(b * t, d)
    out = (o @ wo.T).reshape(b, t, d)
    cache = {"h2": h2, "q": q, "k": k, "v": v, "p": probs, "o": o, "scale": scale, "shape": (b, t, d, n_heads), "block": block}
    return out, cache


def attention_probs(cache) -> np.ndarray:
    """Reassemble the full (B, H, T, T) probability tensor from a forward cache."""
    b, t, _, n_heads = cache["shape"]
    p = np.zeros((b, n_heads, t, t))
    for (lo, hi), tile in zip(_query_blocks(t, cache["block"]), cache["p"]):
        p[:, :, lo:hi, :hi] = tile
    return p


def attention_backward(dout, c, wq, wk, wv, wo, cos, sin):
    """Returns ``(dh, dwq, dwk, dwv, dwo)`` with respect to the virtual weights."""
    b, t, d, n_heads = c["shape"]
    hd = d // n_heads
    dout2 = dout.reshape(b * t, d)
    dwo = dout2.T @ c["o"]
    do = np.ascontiguousarray((dout2 @ wo).reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3))
    q, k, v = c["q"], c["k"], c["v"]
    vt = v.transpose(0, 1, 3, 2)
    dq = np.empty_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for (lo, hi), p in zip(_query_blocks(t, c["block"]), c["p"]):
        do_b = do[:, :, lo:hi]
        dp = do_b @ vt[..., :hi]
        dv[:, :, :hi] += p.transpose(0, 1, 3, 2) @ do_b
        dp *= p
        rowsum = dp.sum(axis=-1, keepdims=True)
        dp -= p * rowsum
        dq[:, :, lo:hi] = dp @ k[:, :, :hi]
        dk[:, :, :hi] += dp.transpose(0, 1, 3, 2) @ q[:, :, lo:hi]
    scale = c["scale"]
    dq = rope_backward(dq * scale, cos, sin)
    dk = rope_backward(dk * scale, cos, sin)

    def merge(z):
        return z.transpose(0, 2, 1, 3).reshape(b * t, d)

    dq2, dk2, dv2 = merge(dq), merge(dk), merge(dv)
    h2 = c["h2"]
    dh = dq2 @ wq + dk2 @ wk + dv2 @ wv
    return dh.reshape(b, t, d), dq2.T @ h2, dk2.T @ h2, dv2.T @ h2, dwo


def ffn_forward(h, wu, wd):
    """``gelu(h W_u^T) W_d^T`` on (B, T, d); returns ``(out, cache)``."""
    b, t, d = h.shape
    h2 = h.reshape(b * t, d)
    u = h2 @ wu.T
    cdf = ndtr(u)
    g = u * cdf
    out = (g @ wd.T).reshape(b, t, d)
    return out, {"h2": h2, "u": u, "cdf": cdf, "g": g}


def ffn_backward(dout, c, wu, wd):
    b, t, d = dout.shape
    dout2 = dout.reshape(b * t, d)
    dwd = dout2.T @ c["g"]
    u = c["u"]
    du = dout2 @ wd
    du *= c["cdf"] + u * np.exp(-0.5 * u * u) * _INV_SQRT_2PI
    dwu = du.T @ c["h2"]
    dh = (du @ wu).reshape(b, t, d)
    return dh, dwu, dwd


def softmax_xent(logits: np.ndarray, targets: np.ndarray, z_coeff: float):
    """Mean cross-entropy plus ``z_coeff * mean(lse^2)`` over positions with ``target >= 0``.

    Returns ``(loss, ce, dlogits)`` where ``ce`` excludes the z-loss term.
    """
    m = logits.shape[0]
    valid = targets >= 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, 0.0, np.zeros_like(logits)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    se = ex.sum(axis=1, keepdims=True)
    lse = (mx + np.log(se))[:, 0]
    tgt = np.where(valid, targets, 0)
    rows = np.arange(m)
    w = valid / n_valid
    ce_each = lse - logits[rows, tgt]
    ce = float(np.sum(ce_each * w))
    loss = ce + z_coeff * float(np.sum(lse * lse * w))
    dlogits = ex * ((w * (1.0 + 2.0 * z_coeff * lse)) / se[:, 0])[:, None]
    dlogits[rows, tgt] -= w
    return loss, ce, dlogits


# -- model -------------------------------------------------------------------------


@dataclass
class ActivationCache:
    forward_id: int
    tokens: np.ndarray
    virtual: dict[str, np.ndarray]
    layers: list[dict] = field(default_factory=list)
    final_in: np.ndarray | None = None
    final_out: np.ndarray | None = None
    dlogits: np.ndarray | None = None
    loss: float = 0.0
    ce: float = 0.0
    consumed: bool = False


class TransformerLM:
    """Decoder-only language model over a fixed parameter dictionary."""

    def __init__(self, config: ModelConfig, reparam_mode: ReparamMode | None = None):
        self.config = config
        self.reparam = reparam_mode if reparam_mode is not None else ReparamMode(kind="none")
        self.embed_scale = 1.0
        self.params: dict[str, ParamTensor] = {}
        for name, (role, layer, shape) in config.shapes().items():
            init = np.ones(shape) if role == GAMMA_ROLE else np.zeros(shape)
            self.params[name] = ParamTensor(name=name, role=role, layer=layer, weight=init)
        self._forward_id = 0
        self._rope: dict[int, tuple] = {}
        self._masks: dict[int, np.ndarray] = {}
        self.zero_grad()

    # bookkeeping ----------------------------------------------------------------

    @property
    def residual_scale(self) -> float:
        if self.reparam.kind == "residual_scaling":
            return reparam.residual_multiplier(self.config.n_layers)
        return 1.0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.weight.size + p.n_gate_params for p in self.params.values())

    def _tables(self, t: int):
        if t not in self._rope:
            self._rope[t] = rope_tables(t, self.config.head_dim, self.config.rope_base)
            self._masks[t] = causal_mask(t)
        cos, sin = self._rope[t]
        return cos, sin, self._masks[t]

    def virtual_weights(self) -> dict[str, np.ndarray]:
        kind = self.reparam.kind
        return {name: reparam.virtual_weight(p, kind) for name, p in self.params.items()}

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise InputError(f"tokens must have shape (batch, time), got {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError("token ids must be integers")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise InputError(f"token id out of range [0, {self.config.vocab})")
        return tokens.astype(np.int64, copy=False)

    # forward --------------------------------------------------------------------

    def _forward(self, tokens: np.ndarray, keep: bool):
        cfg = self.config
        wv = self.virtual_weights()
        b, t = tokens.shape
        cos, sin, mask = self._tables(t)
        r = self.residual_scale
        eps = cfg.rmsnorm_eps
        self._forward_id += 1
        cache = ActivationCache(forward_id=self._forward_id, tokens=tokens, virtual=wv)

        x = wv["W_e"][tokens] * self.embed_scale
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            g1, g2 = wv[pre + "gamma_LN_attn"], wv[pre + "gamma_LN_ffn"]
            x_attn = x
            a, ac = attention_forward(
                rmsnorm_forward(x, g1, eps), wv[pre + "W_q"], wv[pre + "W_k"], wv[pre + "W_v"], wv[pre + "W_o"],
                cfg.n_heads, cos, sin, mask,
            )
            x = x + r * a if r != 1.0 else x + a
            x_ffn = x
            f, fc = ffn_forward(rmsnorm_forward(x, g2, eps), wv[pre + "W_u"], wv[pre + "W_d"])
            x = x + r * f if r != 1.0 else x + f
            if keep:
                cache.layers.append({"x_attn": x_attn, "attn": ac, "x_ffn": x_ffn, "ffn": fc})
        hf = rmsnorm_forward(x, wv["gamma_LN_final"], eps)
        logits = hf.reshape(b * t, cfg.d) @ wv["W_p"].T
        if keep:
            cache.final_in = x
            cache.final_out = hf
        return logits, cache

    def logits(self, tokens) -> np.ndarray:
        tokens = self._check_tokens(tokens)
        logits, _ = self._forward(tokens, keep=False)
        return logits.reshape(tokens.shape[0], tokens.shape[1], self.config.vocab)

    def forward_loss(self, tokens, targets, z_coeff: float = 0.0) -> tuple[float, ActivationCache]:
        """Mean next-token cross-entropy plus z-loss. Targets of -1 are ignored."""
        tokens = self._check_tokens(tokens)
        targets = np.asarray(targets)
        if targets.ndim == 1:
            targets = targets[None, :]
        if targets.shape != tokens.shape:
            raise InputError(f"targets shape {targets.shape} does not match tokens {tokens.shape}")
        if targets.size and targets.max() >= self.config.vocab:
            raise InputError(f"target id out of range [0, {self.config.vocab})")
        logits, cache = self._forward(tokens, keep=True)
        loss, ce, dlogits = softmax_xent(logits, targets.reshape(-1).astype(np.int64), z_coeff)
        cache.loss, cache.ce, cache.dlogits = loss, ce, dlogits
        return loss, cache

    # backward -------------------------------------------------------------------

    def backward(self, cache: ActivationCache, loss_scale: float = 1.0) -> None:
        """Accumulate gradients of ``loss_scale * loss`` into every tensor's grad slots."""
        if cache.consumed or cache.forward_id != self._forward_id or cache.dlogits is None:
            raise StaleCacheError("backward needs the cache of the most recent forward_loss call")
        cache.consumed = True
        cfg = self.config
        wv = cache.virtual
        b, t = cache.tokens.shape
        cos, sin, _ = self._tables(t)
        r = self.residual_scale
        eps = cfg.rmsnorm_eps
        dvirt: dict[str, np.ndarray] = {}

        dlogits = cache.dlogits * loss_scale if loss_scale != 1.0 else cache.dlogits
        hf2 = cache.final_out.reshape(b * t, cfg.d)
        dvirt["W_p"] = dlogits.T @ hf2
        dhf = (dlogits @ wv["W_p"]).reshape(b, t, cfg.d)
        dx, dvirt["gamma_LN_final"] = rmsnorm_backward(cache.final_in, wv["gamma_LN_final"], dhf, eps)

        for i in reversed(range(cfg.n_layers)):
            pre = f"layer{i}."
            lc = cache.layers[i]
            dbranch = r * dx if r != 1.0 else dx
            dh, dvirt[pre + "W_u"], dvirt[pre + "W_d"] = ffn_backward(dbranch, lc["ffn"], wv[pre + "W_u"], wv[pre + "W_d"])
            dxn, dvirt[pre + "gamma_LN_ffn"] = rmsnorm_backward(lc["x_ffn"], wv[pre + "gamma_LN_ffn"], dh, eps)
            dx = dx + dxn

            dbranch = r * dx if r != 1.0 else dx
            dh, dq, dk, dvv, do = attention_backward(
                dbranch, lc["attn"], wv[pre + "W_q"], wv[pre + "W_k"], wv[pre + "W_v"], wv[pre + "W_o"], cos, sin
            )
            dvirt[pre + "W_q"], dvirt[pre + "W_k"], dvirt[pre + "W_v"], dvirt[pre + "W_o"] = dq, dk, dvv, do
            dxn, dvirt[pre + "gamma_LN_attn"] = rmsnorm_backward(lc["x_attn"], wv[pre + "gamma_LN_attn"], dh, eps)
            dx = dx + dxn

        de = np.zeros_like(wv["W_e"])
        np.add.at(de, cache.tokens.reshape(-1), dx.reshape(b * t, cfg.d) * self.embed_scale)
        dvirt["W_e"] = de

        kind = self.reparam.kind
        for name, p in self.params.items():
            reparam.accumulate_weight_grad(p, kind, dvirt[name])
