"""Numerical probes for the gradient, initialization and optimizer claims the package relies on.

Each probe is seed-deterministic, has no training side effects, and returns
:class:`ProbeResult` objects carrying measured value, expectation and tolerance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import reparam
from .config import RunConfig
from .errors import ConfigError
from .initializers import InitSpec, actual_std, initialize_model, std_table
from .model import ModelConfig, TransformerLM, rmsnorm_backward
from .numcore import Rng, gaussian_fill
from .optim import AdamState, TrainConfig, adam_step
from .params import MATRIX_ROLES, ReparamMode
from .trainer import Corpus, eval_perplexity, run_training

FD_STEP = 1e-5
TINY = dict(d=16, n_layers=2, n_heads=2, vocab=32, ctx=8)
MODES = {
    "none": ("none", "He"),
    "wesar": ("wesar", "WeSaR"),
    "weightnorm": ("weightnorm", "WeSaR"),
    "sigma_reparam": ("sigma_reparam", "WeSaR"),
    "residual_scaling": ("residual_scaling", "Small"),
}


@dataclass
class ProbeResult:
    """``kind``: ``abs`` (|m-e| <= tol), ``rel`` (|m-e| <= tol*|e|) or ``band`` (lo <= m <= hi)."""

    name: str
    measured: float
    expected: float
    tolerance: float
    kind: str = "abs"
    samples: int = 1
    lo: float | None = None
    hi: float | None = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.measured):
            return False
        if self.kind == "abs":
            return abs(self.measured - self.expected) <= self.tolerance
        if self.kind == "rel":
            return abs(self.measured - self.expected) <= self.tolerance * abs(self.expected)
        return self.lo <= self.measured <= self.hi

    def line(self) -> str:
        if self.kind == "band":
            tol = f"[{self.lo:.6g}, {self.hi:.6g}]"
        else:
            tol = f"{self.kind} {self.tolerance:.3g}"
        status = "PASS" if self.passed else "FAIL"
        text = f"{self.name:<34} measured={self.measured:<13.6g} expected={self.expected:<13.6g} tol={tol:<22} n={self.samples:<6} {status}"
        return text + (f"  {self.detail}" if self.detail else "")


def band(name, measured, expected, lo, hi, samples=1, detail="") -> ProbeResult:
    return ProbeResult(name, measured, expected, max(hi - expected, expected - lo), "band", samples, lo, hi, detail)


# -- finite differences --------------------------------------------------------


def tiny_model(kind: str = "wesar", seed: int = 0, fixed_gate: bool = False, **overrides) -> TransformerLM:
    mode_kind, scheme = MODES[kind]
    cfg = ModelConfig(**{**TINY, **overrides})
    mode = ReparamMode(kind=mode_kind, fixed_gate=fixed_gate)
    model = TransformerLM(cfg, mode)
    initialize_model(model, InitSpec(scheme=scheme, sigma=mode.sigma if scheme == "WeSaR" else None), Rng(seed).child("init"))
    return model


def tiny_batch(cfg: ModelConfig, seed: int, batch: int = 2) -> tuple[np.ndarray, np.ndarray]:
    rng = Rng(seed).child("batch")
    tokens = rng.integers(0, cfg.vocab, size=(batch, cfg.ctx))
    targets = rng.integers(0, cfg.vocab, size=(batch, cfg.ctx))
    return tokens, targets


def fd_gradients(model: TransformerLM, tokens, targets, z_coeff: float = 1e-4, step: float = FD_STEP):
    """Analytic and central-difference gradients for every trainable array.

    Returns ``{key: (analytic, numeric)}`` with keys ``name`` and ``name.gate``.
    """
    model.zero_grad()
    _, cache = model.forward_loss(tokens, targets, z_coeff)
    model.backward(cache)
    out = {}
    for name, p in model.params.items():
        arrays = [(name, p.weight, p.grad_weight)]
        if p.gate is not None and p.gate_trainable:
            arrays.append((name + ".gate", p.gate, p.grad_gate))
        for key, arr, analytic in arrays:
            analytic = np.array(analytic, copy=True)
            numeric = np.zeros(arr.shape)
            flat, nflat = arr.reshape(-1), numeric.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + step
                lp, _ = model.forward_loss(tokens, targets, z_coeff)
                flat[j] = old - step
                lm, _ = model.forward_loss(tokens, targets, z_coeff)
                flat[j] = old
                nflat[j] = (lp - lm) / (2.0 * step)
            out[key] = (analytic, numeric)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||, floor)``."""
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor))


def fd_grad_check(kind: str = "wesar", seed: int = 0, tol: float = 1e-4, **overrides) -> list[ProbeResult]:
    """One result per reparam mode: worst per-tensor relative error over weights, gates and gamma."""
    model = tiny_model(kind, seed, **overrides)
    tokens, targets = tiny_batch(model.config, seed)
    grads = fd_gradients(model, tokens, targets)
    errors = {k: rel_error(a, n) for k, (a, n) in grads.items()}
    worst_key = max(errors, key=errors.get)
    n = sum(a.size for a, _ in grads.values())
    return [ProbeResult(f"grad.{kind}", errors[worst_key], 0.0, tol, "abs", n, detail=f"worst={worst_key}")]


# -- gradient scale --------------------------------------------------------------


def gradient_scale_probe(depth: int = 10, d: int = 256, trials: int = 100, seed: int = 0, weight_scale: float = 1.0,
                         lo: float = 0.8, hi: float = 1.25) -> ProbeResult:
    """E||dL/dx||^2 / E||delta||^2 through ``depth`` He-initialized linear layers.

    With ``weight_scale = c`` the expectation is ``c^(2*depth)``; the band is
    multiplicative around it.
    """
    rng = Rng(seed).child("gradscale")
    std = weight_scale / math.sqrt(d)
    num = den = 0.0
    for t in range(trials):
        tr = rng.child(str(t))
        delta = tr.standard_normal(d)
        g = delta
        for layer in range(depth):
            w = gaussian_fill(tr.child(str(layer)), d, d, std)
            g = w.T @ g
        num += float(g @ g)
        den += float(delta @ delta)
    expected = weight_scale ** (2 * depth)
    return band(f"gradscale.L{depth}.d{d}", num / den, expected, lo * expected, hi * expected, trials)


def residual_growth_probe(n_layers: int = 40, d: int = 256, scaled: bool = True, trials: int = 100, seed: int = 0,
                          zero_branch: bool = False, lo: float | None = None, hi: float | None = None) -> ProbeResult:
    """Squared-gradient growth down 2N Pre-LN residual branches ``y = W_o W_v LN(x) + x``.

    Branches are linear with He-initialized weights (the output projection
    shrunk by 1/sqrt(2N) when ``scaled``), and the RMSNorm Jacobian is taken at a
    fresh unit-RMS input for every branch. The nominal expectation is
    ``(1 + s^2)^(2N)`` with ``s^2 = 1/(2N)`` scaled and 1 unscaled.
    """
    rng = Rng(seed).child("residual")
    n_branch = 2 * n_layers
    out_std = (1.0 / math.sqrt(d)) * (1.0 / math.sqrt(n_branch) if scaled else 1.0)
    ones = np.ones(d)
    num = den = 0.0
    for t in range(trials):
        tr = rng.child(str(t))
        delta = tr.standard_normal(d)
        g = delta
        for k in range(n_branch):
            br = tr.child(str(k))
            if zero_branch:
                continue
            w_in = gaussian_fill(br.child("in"), d, d, 1.0 / math.sqrt(d))
            w_out = gaussian_fill(br.child("out"), d, d, out_std)
            x = br.child("x").standard_normal(d)
            x *= math.sqrt(d) / np.linalg.norm(x)
            dx, _ = rmsnorm_backward(x, ones, w_in.T @ (w_out.T @ g), eps=0.0)
            g = g + dx
        num += float(g @ g)
        den += float(delta @ delta)
    s2 = 0.0 if zero_branch else (1.0 / n_branch if scaled else 1.0)
    expected = (1.0 + s2) ** n_branch
    lo = expected / 2 if lo is None else lo
    hi = expected * 2 if hi is None else hi
    label = "zero" if zero_branch else ("scaled" if scaled else "unscaled")
    return band(f"residual.{label}.2N{n_branch}", num / den, expected, lo, hi, trials)


# -- Adam ------------------------------------------------------------------------


def adam_invariance_probe(steps: int = 200, c: float = 7.3, seed: int = 0, shape=(16, 16), tol: float = 1e-12) -> ProbeResult:
    """Max |dW_t(g) - dW_t(c*g)| over ``steps`` Adam steps with eps = 0 and no decay."""
    rng = Rng(seed).child("adam")
    w0 = rng.standard_normal(shape)
    wa, wb = w0.copy(), w0.copy()
    sa, sb = AdamState.like(w0), AdamState.like(w0)
    worst = 0.0
    for t in range(steps):
        g = rng.child(str(t)).standard_normal(shape)
        da = adam_step(wa, g, sa, 1e-3, 0.9, 0.95, 0.0, 0.0)
        db = adam_step(wb, c * g, sb, 1e-3, 0.9, 0.95, 0.0, 0.0)
        worst = max(worst, float(np.max(np.abs(da - db))))
    return ProbeResult(f"adam.sequence.c{c:g}", worst, 0.0, tol, "abs", steps)


def model_adam_invariance_probe(seed: int = 0, factor: float = 4.0, tol: float = 1e-12) -> ProbeResult:
    """Step-1 updates of two WeSaR models whose actual weights differ by ``factor``.

    Model B stores ``factor * W`` with gate ``alpha / factor``, so both models
    use bitwise-identical virtual weights. Adam (eps = 0, no decay) must then
    produce identical updates for every weight and gate.
    """
    from .optim import Adam, clip_global

    a = tiny_model("wesar", seed)
    b = tiny_model("wesar", seed)
    for pa, pb in zip(a.params.values(), b.params.values()):
        if pa.gate is not None:
            pb.weight = pa.weight * factor
            pb.gate = np.array(float(pa.gate) / factor)
    cfg = TrainConfig(weight_decay=0.0, eps=0.0)
    tokens, targets = tiny_batch(a.config, seed)
    deltas = []
    for m in (a, b):
        m.zero_grad()
        _, cache = m.forward_loss(tokens, targets, cfg.z_coeff)
        m.backward(cache)
        opt = Adam(cfg)
        clip_global(opt.grads(m), cfg.clip_threshold)
        deltas.append(opt.step(m, cfg.lr))
    worst = max(float(np.max(np.abs(deltas[0][k] - deltas[1][k]))) for k in deltas[0])
    return ProbeResult(f"adam.model.sigma_x{factor:g}", worst, 0.0, tol, "abs", len(deltas[0]))


# -- spectral norm -----------------------------------------------------------------


def spectral_norm_oracle(w: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000, seed: int = 0) -> float:
    """Largest singular value by power iteration run until successive estimates agree to ``tol``."""
    if not tol > 0:
        raise ConfigError("tol must be positive")
    w = np.asarray(w, dtype=np.float64)
    v = Rng(seed).child("oracle").unit_vector(w.shape[1])
    est = 0.0
    for _ in range(max_iter):
        u = w @ v
        new = float(np.linalg.norm(u))
        if new == 0.0:
            return 0.0
        v = w.T @ (u / new)
        v /= np.linalg.norm(v)
        if abs(new - est) < tol:
            return new
        est = new
    warnings.warn("power iteration did not converge; spectrum may be near-degenerate", RuntimeWarning, stacklevel=2)
    return est


def spectral_probes(seed: int = 0) -> list[ProbeResult]:
    results = [
        ProbeResult("spectral.oracle.diag31", spectral_norm_oracle(np.diag([3.0, 1.0])), 3.0, 1e-8, "abs"),
    ]
    q, _ = np.linalg.qr(Rng(seed).child("orth").standard_normal((16, 16)))
    results.append(ProbeResult("spectral.oracle.orthogonal", spectral_norm_oracle(q), 1.0, 1e-8, "abs"))
    w = Rng(seed).child("w32").standard_normal((32, 32))
    oracle = spectral_norm_oracle(w, seed=seed + 1)
    state = reparam.power_iter_init(w, Rng(seed).child("state"))
    for _ in range(999):
        reparam.power_iteration_step(w, state)
    results.append(ProbeResult("spectral.sigma_reparam.1000", state.estimate, oracle, 0.01, "rel", 1000))
    return results


# -- initialization ------------------------------------------------------------------


def init_probes(d: int = 768, n_layers: int = 12, sigma_sq: float = 4e-5, seed: int = 0) -> list[ProbeResult]:
    sigma = math.sqrt(sigma_sq)
    rows = {r["role"]: r for r in std_table(d, n_layers, sigma)}
    results = [
        ProbeResult("init.he.W_d", rows["W_d"]["he_actual"], math.sqrt(2.0 / (8 * n_layers * d)), 1e-12, "abs"),
        ProbeResult("init.wesar.actual", rows["W_q"]["wesar_actual"], sigma, 1e-12, "abs"),
    ]
    shapes = ModelConfig(d=d, n_layers=n_layers, n_heads=max(1, d // 64)).shapes()
    rng = Rng(seed).child("init-probe")
    for scheme in ("He", "Small", "WeSaR"):
        spec = InitSpec(scheme=scheme, sigma=sigma if scheme == "WeSaR" else None)
        worst, worst_role = 0.0, ""
        for role in MATRIX_ROLES:
            _, _, shape = shapes[f"layer0.{role}" if f"layer0.{role}" in shapes else role]
            std = actual_std(role, spec, d, n_layers)
            sample = gaussian_fill(rng.child(f"{scheme}.{role}"), *shape, std)
            err = abs(float(np.std(sample)) / std - 1.0)
            if err > worst:
                worst, worst_role = err, role
        results.append(ProbeResult(f"init.empirical.{scheme}", worst, 0.0, 0.03, "abs", detail=f"worst={worst_role}"))
    return results


# -- update-ratio skew ---------------------------------------------------------------


def random_corpus(n_bytes: int, seed: int) -> Corpus:
    data = Rng(seed).child("corpus").integers(0, 256, size=n_bytes).astype(np.uint8)
    return Corpus(train=data, heldout=data[:0])


def first_step_ratios(kind: str, d: int = 64, n_layers: int = 12, seed: int = 0) -> list[float]:
    """Per-layer ratio(W_d)/ratio(W_u) after one Adam step with weight decay off."""
    values = {"model.d": d, "model.n_layers": n_layers, "model.ctx": 64, "optim.batch_tokens": 512,
              "optim.total_steps": 1, "optim.weight_decay": 0.0, "reparam.kind": kind, "run.seed": seed}
    if kind == "none":
        values["init.scheme"] = "Small"
    cfg = RunConfig.from_values(values)
    rec = run_training(cfg, random_corpus(1 << 16, seed)).records[0]
    return [rec.tensors[f"layer{i}.W_d"].update_ratio / rec.tensors[f"layer{i}.W_u"].update_ratio for i in range(n_layers)]


def ratio_probes(d: int = 64, n_layers: int = 12, seed: int = 0) -> list[ProbeResult]:
    results = []
    expected = {"small": math.sqrt(2 * n_layers), "wesar": 1.0}
    bounds = {"small": (3.4, 6.4), "wesar": (0.8, 1.25)}
    for label, kind in (("small", "none"), ("wesar", "wesar")):
        ratios = first_step_ratios(kind, d, n_layers, seed)
        lo, hi = bounds[label]
        results.append(band(f"ratio_skew.{label}.min_layer", min(ratios), expected[label], lo, hi, n_layers))
        results.append(band(f"ratio_skew.{label}.max_layer", max(ratios), expected[label], lo, hi, n_layers))
    return results


# -- gate merge ------------------------------------------------------------------------


def merge_probes(seed: int = 0, steps: int = 20) -> list[ProbeResult]:
    values = {"model.d": 32, "model.n_layers": 2, "model.n_heads": 2, "model.ctx": 32, "optim.batch_tokens": 256,
              "optim.total_steps": steps, "optim.warmup": 5, "run.seed": seed}
    cfg = RunConfig.from_values(values)
    data = random_corpus(1 << 14, seed)
    model = run_training(cfg, data).model
    contexts = Rng(seed).child("contexts").integers(0, 256, size=(100, cfg.model.ctx))
    before = model.logits(contexts)
    ppl_before = eval_perplexity(model, data.train[:4096])
    reparam.merge_gates(model)
    after = model.logits(contexts)
    ppl_after = eval_perplexity(model, data.train[:4096])
    return [
        ProbeResult("merge.logits", float(np.max(np.abs(before - after))), 0.0, 1e-6, "abs", contexts.shape[0]),
        ProbeResult("merge.perplexity", ppl_after, ppl_before, 1e-6, "rel"),
    ]


# -- suites --------------------------------------------------------------------------------


def _grad_suite():
    out = []
    for kind in MODES:
        out.extend(fd_grad_check(kind))
    return out


SUITES = {
    "grad": _grad_suite,
    "adam": lambda: [adam_invariance_probe(), model_adam_invariance_probe()],
    "gradscale": lambda: [gradient_scale_probe()],
    "residual": lambda: [
        residual_growth_probe(40, scaled=True, lo=2.2, hi=3.3),
        residual_growth_probe(4, scaled=False),
        residual_growth_probe(4, zero_branch=True, lo=1.0, hi=1.0),
    ],
    "spectral": spectral_probes,
    "init": init_probes,
    "ratio": ratio_probes,
    "merge": merge_probes,
}


def run_suites(names=None) -> list[ProbeResult]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown verify suite(s) {unknown}; choose from {list(SUITES)}")
    results = []
    for n in names:
        results.extend(SUITES[n]())
    return results
