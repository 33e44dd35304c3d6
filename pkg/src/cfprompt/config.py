"""Experiment configuration: a flat ``key = value`` text file.

Blank lines and lines starting with ``#`` are ignored. Keys are the field
names of :class:`ExperimentConfig`; integer lists are comma separated
(``seen = 0,1,2,3``). Command-line flags override file values.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ContractViolation

STRATEGY_CHOICES = ("similarity", "random")


class ConfigError(ContractViolation):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    num_classes: int = 6
    sigma_x: float = 0.02
    seed: int = 0
    corpus_size: int = 4000
    encoder_per_class: int = 200
    test_per_class: int = 50
    seen: tuple = (0, 1, 2, 3)
    unseen: tuple = (4, 5)
    shots: int = 16
    # diffusion schedule
    T: int = 100
    beta_min: float = 1e-3
    beta_max: float = 0.15
    # training budgets
    diffusion_steps: int = 2000
    diffusion_hidden: tuple = (512, 512)
    classifier_steps: int = 2000
    classifier_hidden: tuple = (256, 256)
    encoder_steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    # counterfactuals
    scale: float = 1.0
    strategy: str = "similarity"
    eval_images: int = 100
    dump_images: int = 8
    # prompts
    lambda_cf: float = 1.0
    tau: float = 0.07
    prompt_length: int = 4
    prompt_epochs: int = 600
    prompt_batch_size: int = 32
    prompt_lr: float = 2e-3
    embed_dim: int = 32
    token_dim: int = 32
    repeats: int = 5
    out: str = field(default="runs/default", compare=False)

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ConfigError(f"seen {self.seen} and unseen {self.unseen} overlap")
        if any(not 0 <= c < self.num_classes for c in self.seen + self.unseen):
            raise ConfigError("class ids must lie in [0, num_classes)")
        if self.strategy not in STRATEGY_CHOICES:
            raise ConfigError(f"strategy must be one of {STRATEGY_CHOICES}, got {self.strategy!r}")
        if self.scale < 0 or self.lambda_cf < 0 or self.tau <= 0:
            raise ConfigError("need scale >= 0, lambda_cf >= 0 and tau > 0")
        if self.shots < 1 or self.repeats < 1 or self.T < 2:
            raise ConfigError("need shots >= 1, repeats >= 1 and T >= 2")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self, include_out=True):
        lines = []
        for f in fields(self):
            if f.name == "out" and not include_out:
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        """Hex SHA-256 of every field except the output directory."""
        return hashlib.sha256(self.to_text(include_out=False).encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


_DEFAULTS = ExperimentConfig()
KEYS = tuple(f.name for f in fields(ExperimentConfig))


def parse_value(key, text):
    proto = getattr(_DEFAULTS, key)
    text = text.strip()
    if isinstance(proto, tuple):
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    if isinstance(proto, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(proto, int):
        return int(text)
    if isinstance(proto, float):
        return float(text)
    return text


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines into a dict, with ``source:line`` diagnostics."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, val)
        except ValueError as err:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {err}") from None
    return values


def load_config(path=None, overrides=None):
    """Defaults, then file values, then ``overrides`` (flags win). ``None`` overrides are skipped."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for k, v in (overrides or {}).items():
        if k not in KEYS:
            raise ConfigError(f"unknown override {k!r}")
        if v is not None:
            values[k] = v
    return ExperimentConfig(**values)
