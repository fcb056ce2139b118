"""Run configuration: ``key = value`` files with dotted keys and ``#`` comments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .initializers import BACKBONES, EMBED_SCALINGS, SCHEMES, InitSpec
from .model import ModelConfig
from .optim import TrainConfig
from .params import GATED_KINDS, REPARAM_KINDS, ReparamMode
from .telemetry import SpikeDetector

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


@dataclass(frozen=True)
class Key:
    kind: type | tuple
    default: object
    doc: str


# Every tunable. ``None`` defaults are resolved from other keys (see RunConfig.from_values).
KEYS: dict[str, Key] = {
    "model.d": Key(int, 64, "hidden size d"),
    "model.n_layers": Key(int, 4, "number of Transformer blocks N"),
    "model.n_heads": Key(int, 4, "attention heads (must divide d, even head size)"),
    "model.vocab": Key(int, 256, "vocabulary size (256 for byte corpora)"),
    "model.ctx": Key(int, 256, "context length in tokens"),
    "model.ffn_mult": Key(int, 4, "FFN hidden size as a multiple of d"),
    "model.rmsnorm_eps": Key(float, 1e-5, "RMSNorm epsilon added to mean(x^2)"),
    "model.rope_base": Key(float, 10000.0, "RoPE frequency base"),
    "optim.lr": Key(float, 1e-3, "peak learning rate"),
    "optim.warmup": Key(int, 100, "linear warmup steps"),
    "optim.total_steps": Key(int, 2000, "training steps; cosine decay ends here"),
    "optim.batch_tokens": Key(int, 8192, "tokens per batch (multiple of model.ctx)"),
    "optim.clip": Key(float, 1.0, "global gradient-norm clipping threshold"),
    "optim.weight_decay": Key(float, 0.01, "decoupled weight decay on weight matrices"),
    "optim.z_coeff": Key(float, 1e-4, "z-loss coefficient"),
    "optim.beta1": Key(float, 0.9, "Adam beta1"),
    "optim.beta2": Key(float, 0.95, "Adam beta2"),
    "optim.eps": Key(float, 1e-8, "Adam epsilon"),
    "optim.min_lr_ratio": Key(float, 0.1, "final learning rate as a fraction of optim.lr"),
    "init.scheme": Key(SCHEMES, None, "He | Small | WeSaR (default: WeSaR for gated reparam kinds, else Small)"),
    "init.embed_scaling": Key(EMBED_SCALINGS, "const_multiplier", "He/Small embedding scaling"),
    "init.backbone": Key(BACKBONES, "He", "virtual-weight target for WeSaR and weight normalization"),
    "reparam.kind": Key(REPARAM_KINDS, "wesar", "none | wesar | weightnorm | sigma_reparam | residual_scaling"),
    "reparam.sigma_sq": Key(float, 4e-5, "common variance of actual weights for gated kinds"),
    "reparam.fixed_gate": Key(bool, False, "freeze gates at their initial value"),
    "data.path": Key(str, None, "training corpus (raw bytes); relative to the config file"),
    "data.heldout_fraction": Key(float, 0.1, "trailing fraction of the corpus held out"),
    "run.seed": Key(int, 0, "seed for initialization and batch sampling"),
    "run.out_dir": Key(str, "run", "output directory; relative to the config file"),
    "telemetry.stride": Key(int, 1, "record every k-th step (0 disables telemetry)"),
    "telemetry.spike_window": Key(int, 100, "spike detector trailing window"),
    "telemetry.spike_delta": Key(float, 0.5, "spike threshold in nats above the trailing minimum"),
    "telemetry.spike_armed_after": Key(int, None, "steps before the detector arms (default optim.warmup)"),
    "checkpoint.path": Key(str, None, "checkpoint file (default <out_dir>/checkpoint.bin)"),
    "telemetry.csv": Key(str, None, "telemetry CSV (default <out_dir>/telemetry.csv)"),
}


def _convert(key: str, raw: str):
    spec = KEYS[key]
    raw = raw.strip()
    if isinstance(spec.kind, tuple):
        if raw not in spec.kind:
            raise ConfigError(f"{key} must be one of {spec.kind}, got {raw!r}")
        return raw
    try:
        if spec.kind is bool:
            return _BOOL[raw.lower()]
        if spec.kind is int:
            return int(raw)
        if spec.kind is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
    except (ValueError, KeyError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {spec.kind.__name__}") from None
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return values


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: TrainConfig = field(default_factory=TrainConfig)
    init: InitSpec = field(default_factory=InitSpec)
    reparam: ReparamMode = field(default_factory=ReparamMode)
    spike: SpikeDetector = field(default_factory=SpikeDetector)
    data_path: str | None = None
    heldout_fraction: float = 0.1
    seed: int = 0
    out_dir: str = "run"
    telemetry_stride: int = 1
    checkpoint_path: str | None = None
    csv_path: str | None = None

    @classmethod
    def from_values(cls, values: dict[str, object] | None = None, base_dir=None) -> "RunConfig":
        """Build a config from already-typed key values; missing keys take their defaults."""
        values = dict(values or {})
        unknown = set(values) - set(KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        v = {k: values.get(k, spec.default) for k, spec in KEYS.items()}
        base = Path(base_dir) if base_dir is not None else None

        def resolve(p):
            if p is None or base is None:
                return p
            return str(base / p) if not Path(p).is_absolute() else p

        model = ModelConfig(
            d=v["model.d"], n_layers=v["model.n_layers"], n_heads=v["model.n_heads"], vocab=v["model.vocab"],
            ctx=v["model.ctx"], ffn_mult=v["model.ffn_mult"], rmsnorm_eps=v["model.rmsnorm_eps"],
            rope_base=v["model.rope_base"],
        )
        optim = TrainConfig(
            lr=v["optim.lr"], warmup_steps=v["optim.warmup"], total_steps=v["optim.total_steps"],
            batch_tokens=v["optim.batch_tokens"], clip_threshold=v["optim.clip"],
            weight_decay=v["optim.weight_decay"], z_coeff=v["optim.z_coeff"], beta1=v["optim.beta1"],
            beta2=v["optim.beta2"], eps=v["optim.eps"], min_lr_ratio=v["optim.min_lr_ratio"],
        )
        if optim.batch_tokens % model.ctx:
            raise ConfigError(f"optim.batch_tokens={optim.batch_tokens} is not a multiple of model.ctx={model.ctx}")
        mode = ReparamMode(kind=v["reparam.kind"], sigma_sq=v["reparam.sigma_sq"], fixed_gate=v["reparam.fixed_gate"])
        scheme = v["init.scheme"] or ("WeSaR" if mode.kind in GATED_KINDS else "Small")
        init = InitSpec(
            scheme=scheme,
            sigma=mode.sigma if scheme == "WeSaR" else None,
            embed_scaling=v["init.embed_scaling"],
            backbone=v["init.backbone"],
        )
        if (mode.kind in GATED_KINDS) != (scheme == "WeSaR"):
            raise ConfigError(
                f"init.scheme = {scheme} is incompatible with reparam.kind = {mode.kind}; "
                "gated kinds (wesar, weightnorm, sigma_reparam) need WeSaR, the others He or Small"
            )
        if mode.fixed_gate and mode.kind != "wesar":
            raise ConfigError("reparam.fixed_gate only applies to reparam.kind = wesar")
        if not 0.0 <= v["data.heldout_fraction"] < 1.0:
            raise ConfigError("data.heldout_fraction must lie in [0, 1)")
        if v["telemetry.stride"] < 0:
            raise ConfigError("telemetry.stride must be >= 0")
        armed = v["telemetry.spike_armed_after"]
        spike = SpikeDetector(
            window=v["telemetry.spike_window"],
            delta=v["telemetry.spike_delta"],
            armed_after=optim.warmup_steps if armed is None else armed,
        )
        out_dir = resolve(v["run.out_dir"])
        return cls(
            model=model, optim=optim, init=init, reparam=mode, spike=spike,
            data_path=resolve(v["data.path"]), heldout_fraction=v["data.heldout_fraction"],
            seed=v["run.seed"], out_dir=out_dir, telemetry_stride=v["telemetry.stride"],
            checkpoint_path=resolve(v["checkpoint.path"]) or str(Path(out_dir) / "checkpoint.bin"),
            csv_path=resolve(v["telemetry.csv"]) or str(Path(out_dir) / "telemetry.csv"),
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_values(parse_config_text(text), base_dir=path.parent)


def config_help() -> str:
    width = max(len(k) for k in KEYS)
    lines = []
    for key, spec in KEYS.items():
        default = "(derived)" if spec.default is None else spec.default
        lines.append(f"  {key:<{width}}  {spec.doc} [default: {default}]")
    return "\n".join(lines)
