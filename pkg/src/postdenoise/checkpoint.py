"""Self-describing checkpoint files.

A checkpoint is a ``torch.save``'d dict with plain keys, readable with
``torch.load`` alone::

    format      "postdenoise-checkpoint"
    version     FORMAT_VERSION
    code        package version
    config      TrainConfig as a flat dict
    step        global step
    generator   state dict
    critic      state dict or None
    opt_g       optimizer state dict
    opt_c       optimizer state dict or None
    trained     False for an untrained (step 0) model
"""
from __future__ import annotations

from pathlib import Path

import torch

from .config import ConfigError, TrainConfig, build

FORMAT = "postdenoise-checkpoint"
FORMAT_VERSION = 1
REQUIRED_KEYS = ("format", "version", "config", "step", "generator")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, state, config: TrainConfig) -> Path:
    from . import __version__

    path = Path(path)
    payload = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "code": __version__,
        "config": config.to_dict(),
        "step": state.step,
        "generator": state.generator.state_dict(),
        "critic": state.critic.state_dict() if state.critic is not None else None,
        "opt_g": state.opt_g.state_dict(),
        "opt_c": state.opt_c.state_dict() if state.opt_c is not None else None,
        "trained": state.step > 0,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on garbage input
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    missing = [k for k in REQUIRED_KEYS if k not in payload]
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks keys {missing}")
    if payload["version"] > FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format v{payload['version']} is newer than "
                              f"supported v{FORMAT_VERSION}")
    return payload


def config_from_checkpoint(payload: dict) -> TrainConfig:
    raw = dict(payload["config"])
    for key in ("widths", "critic_widths"):
        raw[key] = tuple(raw[key])
    try:
        return build(TrainConfig, raw)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc


def restore_state(payload: dict, state, config: TrainConfig | None = None):
    """Load parameters and optimizer state into an already-built TrainState."""
    if config is not None:
        saved = config_from_checkpoint(payload)
        for key in ("mode", "image_size", "channels", "widths", "critic_widths"):
            if getattr(saved, key) != getattr(config, key):
                raise CheckpointError(
                    f"checkpoint {key}={getattr(saved, key)!r} does not match config "
                    f"{key}={getattr(config, key)!r}")
    try:
        state.generator.load_state_dict(payload["generator"])
        state.opt_g.load_state_dict(payload["opt_g"])
        if state.critic is not None:
            state.critic.load_state_dict(payload["critic"])
            state.opt_c.load_state_dict(payload["opt_c"])
    except (RuntimeError, KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint does not fit the model: {exc}") from exc
    state.step = int(payload["step"])
    return state


def load_generator(path):
    """Return (generator in eval mode, TrainConfig, payload)."""
    from .models import Generator

    payload = load_checkpoint(path)
    config = config_from_checkpoint(payload)
    gen = Generator(config.generator_config())
    try:
        gen.load_state_dict(payload["generator"])
    except RuntimeError as exc:
        raise CheckpointError(f"generator weights do not fit the checkpoint config: {exc}") from exc
    gen.eval()
    for p in gen.parameters():
        p.requires_grad_(False)
    return gen, config, payload
