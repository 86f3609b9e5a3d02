"""Configuration dataclasses and the flat ``key = value`` file format.

Config files are line oriented::

    # comment
    include = base.cfg
    mode = pscgan
    widths = 16,32,32

``include`` paths are resolved relative to the including file and are read
first, so later keys override included ones. Environment variables named
``POSTDENOISE_<KEY>`` override file values; explicit overrides passed by the
caller (CLI flags) win over both.
"""
from __future__ import annotations

import dataclasses
import difflib
import hashlib
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "POSTDENOISE_"

MODES = ("pscgan", "mse", "lag")

# (learning_rate, adam_beta1, adam_beta2) used when the config leaves them unset
MODE_OPTIM_DEFAULTS = {
    "pscgan": (2.5e-4, 0.0, 0.99),
    "lag": (2.5e-4, 0.0, 0.99),
    "mse": (5e-4, 0.9, 0.99),
}


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class GeneratorConfig:
    image_size: int = 128
    channels: int = 3
    # fine-to-coarse; len(widths) is the number of encoder/decoder scales
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    upsample_mode: str = "bilinear"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if any(w < 1 for w in self.widths):
            raise ConfigError("all generator widths must be >= 1", "widths")
        if self.image_size % (2 ** (self.n_scales - 1)):
            raise ConfigError(
                f"image_size={self.image_size} is not divisible by 2^(n_scales-1)="
                f"{2 ** (self.n_scales - 1)}", "image_size")

    @property
    def n_scales(self) -> int:
        return len(self.widths)

    @property
    def smallest_scale(self) -> int:
        return self.image_size // 2 ** (self.n_scales - 1)


@dataclass
class CriticConfig:
    image_size: int = 128
    channels: int = 3
    # fine-to-coarse; each entry after the first halves the resolution
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if any(w < 1 for w in self.widths):
            raise ConfigError("all critic widths must be >= 1", "critic_widths")


@dataclass
class TrainConfig:
    # optimisation (names follow the training algorithm's symbols)
    B: int = 32
    PB: int = 8
    M: int = 8
    lambda_mm: float = 1e-2
    lambda_gp: float = 10.0
    lambda_lag: float = 1e-2
    n_critic: int = 5
    learning_rate: float | None = None
    adam_beta1: float | None = None
    adam_beta2: float | None = None
    total_steps: int = 100_000
    sigma: float = 50.0
    mode: str = "pscgan"
    sigma_z_train: float = 1.0
    grad_clip: float = 0.0

    # architecture
    image_size: int = 128
    channels: int = 3
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    critic_widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    upsample_mode: str = "bilinear"

    # data
    data_root: str = ""
    split_rule: str = "random"
    n_train: int = 0
    n_test: int = 0
    test_start: int = 0
    hflip_p: float = 0.5
    interpolation: str = "bilinear"

    # run control
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1
    output_dir: str = "runs"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.critic_widths = tuple(int(w) for w in self.critic_widths)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", "mode")
        lr, b1, b2 = MODE_OPTIM_DEFAULTS[self.mode]
        if self.learning_rate is None:
            self.learning_rate = lr
        if self.adam_beta1 is None:
            self.adam_beta1 = b1
        if self.adam_beta2 is None:
            self.adam_beta2 = b2
        if self.PB > self.B:
            raise ConfigError(f"PB={self.PB} exceeds B={self.B}", "PB")
        if self.M < 1:
            raise ConfigError("M must be >= 1", "M")
        for name in ("lambda_mm", "lambda_gp", "lambda_lag"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", name)
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0", "sigma")

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.image_size, self.channels, self.widths, self.upsample_mode)

    def critic_config(self) -> CriticConfig:
        return CriticConfig(self.image_size, self.channels, self.critic_widths)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(dump_flat(self.to_dict()).encode()).hexdigest()[:12]


# --- flat key=value files -------------------------------------------------

def read_flat(path: str | os.PathLike, _seen: frozenset = frozenset()) -> dict[str, str]:
    """Read a flat config file into raw string values, resolving ``include``."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "include":
            values.update(read_flat(path.parent / value, _seen | {path}))
        else:
            values[key] = value
    return values


def dump_flat(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = ""
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def nearest_key(key: str, valid) -> str | None:
    match = difflib.get_close_matches(key, list(valid), n=1, cutoff=0.5)
    return match[0] if match else None


def _convert(raw, annotation):
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is tuple:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if type(None) in args:
        if raw == "":
            return None
        annotation = next(a for a in args if a is not type(None))
    if annotation is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    if annotation is int:
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if annotation is float:
        return float(raw)
    return raw


def build(cls, values: dict):
    """Instantiate dataclass ``cls`` from raw values, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            hint = nearest_key(key, names)
            msg = f"unknown config key {key!r}"
            if hint:
                msg += f" (did you mean {hint!r}?)"
            raise ConfigError(msg, key)
        try:
            kwargs[key] = _convert(raw, hints[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})", key) from exc
    return cls(**kwargs)


def env_overrides(cls, environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    names = {f.name for f in fields(cls)}
    out = {}
    for name in names:
        env_key = ENV_PREFIX + name.upper()
        if env_key in environ:
            out[name] = environ[env_key]
    return out


def load_config(path=None, overrides: dict | None = None, cls=TrainConfig, environ=None):
    values: dict = {}
    if path is not None:
        values.update(read_flat(path))
    values.update(env_overrides(cls, environ))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build(cls, values)


@dataclass
class RunConfig:
    """Resolved parameters of a single CLI invocation."""

    command: str
    seed: int = 0
    output_dir: str = "runs"
    params: dict = field(default_factory=dict)

    def to_flat(self) -> dict:
        """Top-level fields and ``params`` merged into one flat mapping."""
        return {"command": self.command, "seed": self.seed, "output_dir": self.output_dir,
                **self.params}
