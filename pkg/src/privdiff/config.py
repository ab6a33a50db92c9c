"""Flat key=value run configuration with typed parsing.

One file drives every command; '#' starts a comment, blank lines are
ignored, keys are declared once in the schema below. Values keep their
declared type; empty means "unset" for the optional keys. Exactly one of
sigma / target_epsilon may be set.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

__all__ = ["RunConfig", "parse_config", "config_from_mapping", "ConfigError"]


class ConfigError(ValueError):
    """Bad key, bad value, or a violated cross-field rule."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_hidden(s: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in s.split(",") if p.strip())
    except ValueError as e:
        raise ConfigError(f"bad layer widths {s!r}") from e
    if not dims or any(d <= 0 for d in dims):
        raise ConfigError(f"layer widths must be positive integers: {s!r}")
    return dims


@dataclass
class RunConfig:
    """Every knob of the pipeline; defaults suit full-scale image runs."""

    # data
    dataset: str = ""
    clusters: int = 0                  # 0: labels come from the file; K>0: k-means
    # forward-process schedule
    time_steps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.028
    # networks
    teacher_hidden: tuple[int, ...] = (64, 64)
    student_hidden: tuple[int, ...] = (32,)
    disc_hidden: tuple[int, ...] = (32,)
    time_embed_dim: int = 8
    student_conditioned: bool = True
    disc_conditioned: bool = True
    # teacher phase
    teacher_iterations: int = 4000
    teacher_batch_size: int = 128
    teacher_lr: float = 0.05
    guidance_w: float = 1.8
    label_dropout: float = 0.1
    # student phase
    iterations: int = 500
    batch_size: int = 128
    lambda_adv: float = 1.0
    lr: float = 1e-4
    lr_disc: float = 1e-4
    use_data_mse: bool = True
    # privacy
    clip_bound: float = 1e-6
    sigma: Optional[float] = None
    target_epsilon: Optional[float] = None
    delta: float = 1e-5
    # run plumbing
    seed: int = 0
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    sample_n: int = 512
    output_dir: str = "privdiff-run"

    def validate(self, need_dataset: bool = False, need_privacy: bool = False) -> None:
        if need_dataset:
            if not self.dataset:
                raise ConfigError("dataset path is required")
            if not Path(self.dataset).exists():
                raise ConfigError(f"dataset file not found: {self.dataset}")
        if need_privacy:
            if (self.sigma is None) == (self.target_epsilon is None):
                raise ConfigError("exactly one of sigma / target_epsilon must be set")


# field -> (parser, may_be_empty); empty means None for the optional pair
_SCHEMA = {
    "dataset": (str, False),
    "clusters": (int, False),
    "time_steps": (int, False),
    "beta_start": (float, False),
    "beta_end": (float, False),
    "teacher_hidden": (_parse_hidden, False),
    "student_hidden": (_parse_hidden, False),
    "disc_hidden": (_parse_hidden, False),
    "time_embed_dim": (int, False),
    "student_conditioned": (_parse_bool, False),
    "disc_conditioned": (_parse_bool, False),
    "teacher_iterations": (int, False),
    "teacher_batch_size": (int, False),
    "teacher_lr": (float, False),
    "guidance_w": (float, False),
    "label_dropout": (float, False),
    "iterations": (int, False),
    "batch_size": (int, False),
    "lambda_adv": (float, False),
    "lr": (float, False),
    "lr_disc": (float, False),
    "use_data_mse": (_parse_bool, False),
    "clip_bound": (float, False),
    "sigma": (float, True),
    "target_epsilon": (float, True),
    "delta": (float, False),
    "seed": (int, False),
    "val_fraction": (float, False),
    "checkpoint_every": (int, False),
    "sample_n": (int, False),
    "output_dir": (str, False),
}


def config_from_mapping(pairs: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    assert set(_SCHEMA) == {f.name for f in fields(RunConfig)}
    for key, raw in pairs.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, optional = _SCHEMA[key]
        raw = raw.strip()
        if raw == "":
            if optional:
                setattr(cfg, key, None)
                continue
            raise ConfigError(f"empty value for {key!r}")
        try:
            setattr(cfg, key, parser(raw))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    return cfg


def parse_config(path, overrides: Optional[list[str]] = None) -> RunConfig:
    """Read key=value lines, then apply --set style overrides in order."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = stripped.split("=", 1)
        pairs[k.strip()] = v.strip()
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override must be key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        pairs[k.strip()] = v.strip()
    return config_from_mapping(pairs)
