"""Flat-key configuration: a plain-text file of ``section.key = value``
lines, CLI overrides, and a digest over the architecture-determining
keys that guards checkpoint/config compatibility.

Value grammar: int, float, bool (true/false), comma-separated int list,
or bare string. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import hashlib
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "data.dir": "",
    "data.hr_size": 64,
    "data.channels": 1,
    "degrade.factor": 4,
    "degrade.blur_min": 0.2,
    "degrade.blur_max": 1.5,
    "degrade.noise_min": 0.0,
    "degrade.noise_max": 0.05,
    "degrade.per_step": False,  # resample blur/noise every time an image is drawn
    "codec.patch": 8,
    "codec.dim": 64,
    "codebook.size": 512,
    "codebook.iters": 30,
    "codebook.polish": 1,
    "schedule": [1, 2, 3, 4, 6, 8],
    "model.depth": 4,
    "model.heads": 4,
    "model.width": 128,
    "model.mlp_ratio": 4.0,
    "model.mask_hidden": 32,
    "model.condition": True,
    "loss.lambda": 1.0,
    "loss.warmup_steps": 200,  # ramp the consistency weight from 0 over this many steps
    "loss.cumulative": "ste",  # "ste" | "soft": forward value of the cumulative prediction
    "loss.stop_gradient": False,
    "loss.pixel_space": False,
    "train.steps": 2000,
    "train.batch": 8,
    "train.lr": 3e-4,
    "train.weight_decay": 0.05,
    "train.cosine": True,
    "train.seed": -1,  # must be set explicitly for randomized runs
    "train.checkpoint_every": 500,
    "train.dtype": "float32",
}

# keys that determine tensor shapes and token semantics; a checkpoint can
# only be loaded under a config whose digest over these matches
DIGEST_KEYS = (
    "data.hr_size",
    "data.channels",
    "degrade.factor",
    "codec.patch",
    "codec.dim",
    "codebook.size",
    "schedule",
    "model.depth",
    "model.heads",
    "model.width",
    "model.mlp_ratio",
    "model.mask_hidden",
    "model.condition",
)


def parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in raw:
        try:
            return [int(p.strip()) for p in raw.split(",") if p.strip()]
        except ValueError as e:
            raise ConfigError(f"bad list value {raw!r}") from e
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


class Config:
    """Dictionary of flat keys with typed defaults."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        if values:
            for k, v in values.items():
                self.set(k, v)

    @classmethod
    def from_file(cls, path) -> "Config":
        cfg = cls()
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            cfg.set(key.strip(), parse_value(raw))
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "Config":
        cfg = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            cfg.set(key.strip(), parse_value(raw))
        return cfg

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = parse_value(value)
        base = DEFAULTS[key]
        if isinstance(base, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key}: expected true/false, got {value!r}")
        elif isinstance(base, int) and not isinstance(value, bool):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if not isinstance(value, int):
                raise ConfigError(f"{key}: expected int, got {value!r}")
        elif isinstance(base, float):
            if isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, float):
                raise ConfigError(f"{key}: expected float, got {value!r}")
        elif isinstance(base, list):
            if isinstance(value, int):
                value = [value]
            if not isinstance(value, list):
                raise ConfigError(f"{key}: expected int list, got {value!r}")
        self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str):
        return self.values[key]

    def apply_overrides(self, overrides: list[str]) -> None:
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, _, raw = item.partition("=")
            self.set(key.strip(), parse_value(raw))

    def canonical_text(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in sorted(self.values))

    def digest(self) -> str:
        text = "".join(f"{k} = {format_value(self.values[k])}\n" for k in DIGEST_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()

    def validate_for_training(self) -> None:
        v = self.values
        positive = (
            "data.hr_size", "degrade.factor", "codec.patch", "codec.dim",
            "codebook.size", "codebook.iters", "model.depth", "model.heads",
            "model.width", "model.mask_hidden", "train.batch",
        )
        for key in positive:
            if v[key] <= 0:
                raise ConfigError(f"{key} must be positive, got {v[key]}")
        if v["train.steps"] < 0:
            raise ConfigError("train.steps must be >= 0")
        if v["train.checkpoint_every"] < 0:
            raise ConfigError("train.checkpoint_every must be >= 0 (0 disables periodic checkpoints)")
        if v["train.lr"] <= 0:
            raise ConfigError("train.lr must be positive")
        if v["loss.lambda"] < 0:
            raise ConfigError("loss.lambda must be >= 0")
        if v["train.weight_decay"] < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if v["train.seed"] < 0:
            raise ConfigError("train.seed must be set (>= 0); randomized runs require an explicit seed")
        if v["data.hr_size"] % (v["degrade.factor"]) or v["data.hr_size"] % v["codec.patch"]:
            raise ConfigError("data.hr_size must be divisible by degrade.factor and codec.patch")
        latent = v["data.hr_size"] // v["codec.patch"]
        sched = v["schedule"]
        if sched[-1] != latent:
            raise ConfigError(
                f"schedule must end at the codec latent resolution {latent}, got {sched[-1]}"
            )
        if v["codec.dim"] > v["data.channels"] * v["codec.patch"] ** 2:
            raise ConfigError("codec.dim exceeds flattened patch size")
