"""``key = value`` configuration files with command-line overrides.

Unknown keys are rejected. Values are validated as a whole before anything
runs. Setting ``preset = full`` swaps in the full-scale defaults (256 px
input, eight stages, batch 64, 32,000 iterations, wide encoder); keys
given explicitly still win.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError
from .progan import DESK_WIDTHS, FULL_WIDTHS, Architecture
from .train import GAN_MODES, MODES, ObjectiveConfig, Schedule, TrainConfig

_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def _int(s):
    return int(s)


def _float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _bool(s):
    return _BOOL[s.lower()]


def _ints(s):
    return tuple(int(p) for p in s.split(",") if p.strip())


def _str(s):
    return s


@dataclass
class Config:
    preset: str = "desk"
    mode: str = "progressive"
    seed: int = 0
    lambda_l1: float = 100.0
    gan_mode: str = "non_saturating"
    stages: tuple = (8, 16, 32, 64)
    iterations: int = 6000
    fade_fraction: float = 0.5
    fade_mode: str = "linear"
    batch_size: int = 16
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps_adam: float = 1e-8
    widths: tuple = DESK_WIDTHS
    dropout: float = 0.5
    dropout_blocks: int = 3
    bn_momentum: float = 0.9
    bn_eps: float = 1e-9
    discriminator_sees_input: bool = False
    deterministic_inference: bool = True
    threshold: float = 0.5
    log_interval: int = 1
    probe_interval: int = 100
    probe_size: int = 64
    checkpoint_interval: int = 0
    split_fraction: float = 0.7
    split_seed: int = 0
    manifest: str = ""
    n_scenes: int = 2000
    scene_seed: int = 0
    buildings: tuple = (2, 6)
    building_size: tuple = (6, 18)
    roads: tuple = (0, 2)
    cars: tuple = (2, 8)
    seeds: tuple = (0, 1, 2)
    modes: tuple = MODES
    n_jobs: int = 1
    out_dir: str = "runs/default"

    @property
    def full_res(self) -> int:
        return self.stages[-1]

    def architecture(self) -> Architecture:
        return Architecture(full_res=self.full_res, base_res=self.stages[0],
                            widths=self.widths, dropout=self.dropout,
                            dropout_blocks=self.dropout_blocks, bn_momentum=self.bn_momentum,
                            bn_eps=self.bn_eps,
                            discriminator_sees_input=self.discriminator_sees_input)

    def schedule(self) -> Schedule:
        fade = self.fade_fraction if self.fade_mode == "linear" else 0.0
        return Schedule.progressive(self.stages, self.iterations, self.batch_size, fade)

    def train_config(self, mode: str | None = None, seed: int | None = None) -> TrainConfig:
        return TrainConfig(mode=mode or self.mode,
                           objective=ObjectiveConfig(self.lambda_l1, self.gan_mode),
                           lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                           eps_adam=self.eps_adam, seed=self.seed if seed is None else seed,
                           log_interval=self.log_interval, probe_interval=self.probe_interval,
                           probe_size=self.probe_size, threshold=self.threshold)

    def scene_spec(self):
        from .data import SceneSpec
        scale = self.full_res / 64
        return SceneSpec(size=self.full_res, buildings=self.buildings,
                         building_size=tuple(max(1, int(round(v * scale)))
                                             for v in self.building_size),
                         roads=self.roads, cars=self.cars)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        cfg = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
        validate(cfg)
        return cfg

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    def run_dict(self) -> dict:
        """Keys that change results: everything except output location and job count."""
        d = self.to_dict()
        for k in ("out_dir", "n_jobs"):
            d.pop(k)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.run_dict(), sort_keys=True).encode()).hexdigest()


PARSERS = {
    "preset": _str, "mode": _str, "seed": _int, "lambda_l1": _float, "gan_mode": _str,
    "stages": _ints, "iterations": _int, "fade_fraction": _float, "fade_mode": _str,
    "batch_size": _int, "lr": _float, "beta1": _float, "beta2": _float, "eps_adam": _float,
    "widths": _ints, "dropout": _float, "dropout_blocks": _int, "bn_momentum": _float,
    "bn_eps": _float, "discriminator_sees_input": _bool, "deterministic_inference": _bool,
    "threshold": _float, "log_interval": _int, "probe_interval": _int, "probe_size": _int,
    "checkpoint_interval": _int, "split_fraction": _float, "split_seed": _int,
    "manifest": _str, "n_scenes": _int, "scene_seed": _int, "buildings": _ints,
    "building_size": _ints, "roads": _ints, "cars": _ints, "seeds": _ints,
    "modes": lambda s: tuple(p.strip() for p in s.split(",") if p.strip()),
    "n_jobs": _int, "out_dir": _str,
}

PRESETS = {
    "desk": {},
    "full": {"stages": (2, 4, 8, 16, 32, 64, 128, 256), "iterations": 32000,
              "batch_size": 64, "widths": FULL_WIDTHS},
}


def validate(cfg: Config, lines: dict | None = None) -> Config:
    lines = lines or {}

    def fail(key, msg):
        raise ConfigError(msg, key, lines.get(key))

    if cfg.preset not in PRESETS:
        fail("preset", f"unknown preset {cfg.preset!r}")
    if cfg.mode not in MODES:
        fail("mode", f"mode must be one of {', '.join(MODES)}")
    for m in cfg.modes:
        if m not in MODES:
            fail("modes", f"unknown mode {m!r}")
    if cfg.gan_mode not in GAN_MODES:
        fail("gan_mode", f"gan_mode must be one of {', '.join(GAN_MODES)}")
    if cfg.fade_mode not in ("linear", "hard"):
        fail("fade_mode", "fade_mode must be linear or hard")
    if cfg.lambda_l1 < 0:
        fail("lambda_l1", "lambda_l1 must be >= 0")
    if not cfg.stages:
        fail("stages", "at least one stage is required")
    if any(s <= 0 or s & (s - 1) for s in cfg.stages):
        fail("stages", "stage resolutions must be positive powers of two")
    for a, b in zip(cfg.stages, cfg.stages[1:]):
        if b != 2 * a:
            fail("stages", f"stage resolutions must double ({a} -> {b})")
    if len(cfg.widths) != int(math.log2(cfg.full_res)):
        fail("widths", f"a {cfg.full_res}px input needs {int(math.log2(cfg.full_res))} "
                       f"encoder widths, got {len(cfg.widths)}")
    if any(w <= 0 for w in cfg.widths):
        fail("widths", "widths must be positive")
    if cfg.iterations < len(cfg.stages):
        fail("iterations", "need at least one iteration per stage")
    if cfg.batch_size < 2:
        fail("batch_size", "batch_size must be at least 2")
    if cfg.lr < 0:
        fail("lr", "lr must be >= 0")
    for key in ("beta1", "beta2", "bn_momentum"):
        if not 0.0 <= getattr(cfg, key) < 1.0:
            fail(key, f"{key} must be in [0, 1)")
    for key in ("eps_adam", "bn_eps"):
        if getattr(cfg, key) <= 0:
            fail(key, f"{key} must be > 0")
    if not 0.0 <= cfg.dropout < 1.0:
        fail("dropout", "dropout must be in [0, 1)")
    if not 0.0 <= cfg.fade_fraction <= 1.0:
        fail("fade_fraction", "fade_fraction must be in [0, 1]")
    if not 0.0 < cfg.threshold <= 1.0:
        fail("threshold", "threshold must be in (0, 1]")
    if not 0.0 < cfg.split_fraction <= 1.0:
        fail("split_fraction", "split_fraction must be in (0, 1]")
    for key in ("log_interval",):
        if getattr(cfg, key) < 1:
            fail(key, f"{key} must be >= 1")
    for key in ("probe_interval", "probe_size", "checkpoint_interval", "dropout_blocks"):
        if getattr(cfg, key) < 0:
            fail(key, f"{key} must be >= 0")
    if cfg.n_scenes < 1:
        fail("n_scenes", "n_scenes must be >= 1")
    for key in ("buildings", "building_size", "roads", "cars"):
        v = getattr(cfg, key)
        if len(v) != 2 or v[0] < 0 or v[0] > v[1]:
            fail(key, f"{key} must be a range 'lo,hi' with 0 <= lo <= hi")
    if not cfg.seeds:
        fail("seeds", "at least one seed is required")
    if cfg.n_jobs < 1:
        fail("n_jobs", "n_jobs must be >= 1")
    if not cfg.out_dir:
        fail("out_dir", "out_dir must not be empty")
    return cfg


def _parse_value(key, raw, line=None):
    if key not in PARSERS:
        raise ConfigError("unknown key", key, line)
    try:
        return PARSERS[key](raw.strip())
    except (ValueError, KeyError):
        raise ConfigError(f"cannot parse value {raw.strip()!r}", key, line) from None


def parse_text(text: str, overrides: dict | None = None) -> Config:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key in values:
            raise ConfigError("duplicate key", key, lineno)
        values[key] = _parse_value(key, value, lineno)
        lines[key] = lineno
    for key, raw in (overrides or {}).items():
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        lines.pop(key, None)
    preset = values.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}", "preset", lines.get("preset"))
    merged = {**PRESETS[preset], **values}
    return validate(Config(**merged), lines)


def parse_config(path=None, overrides: dict | None = None) -> Config:
    """Read ``path`` (if given) and apply ``overrides`` (raw strings or values)."""
    text = ""
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
    return parse_text(text, overrides)
