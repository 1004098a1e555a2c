"""Run configuration: a flat ``key=value`` text file with documented defaults."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .train import TrainConfig, lambda_from_sigma2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    in_steps: int = 24
    out_steps: int = 6
    d_model: int = 64
    heads: int = 2
    blocks: int = 3
    cheb_order: int = 3
    target: str = "PM2.5"
    use_moran: bool = True
    use_macro: bool = True
    use_micro: bool = True
    macro_dim: int = 16
    micro_hidden: int = 16
    head_hidden: int = 16
    aux_hidden: int = 16
    # graph priors
    sigma_km: float = 500.0
    adj_threshold: float = 0.05
    moran_k: int = 8
    # data
    split: tuple = (0.7, 0.1, 0.2)
    stride: int = 1
    max_missing: float = 0.5
    season_period: int = 24
    # training
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 5e-4
    lr_decay: float = 0.0
    rmsprop_alpha: float = 0.99
    epsilon: float = 1e-8
    max_epochs: int = 50
    max_steps: int = 0
    patience: int = 10
    seed: int = 0
    loss_mode: str = "fixed"
    lam: float = field(default=0.5, metadata={"key": "lambda"})
    sigma2: float = 0.0  # > 0 derives lambda = 1 / (2 sigma2)
    # paths (not part of the hash)
    data_dir: str = field(default="", metadata={"path": True})
    out_dir: str = field(default="", metadata={"path": True})

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be non-negative")
        if self.sigma2 > 0:
            object.__setattr__(self, "lam", lambda_from_sigma2(self.sigma2))
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- key mapping -------------------------------------------------------------------

    @staticmethod
    def keys() -> dict[str, str]:
        """File key -> attribute name."""
        return {f.metadata.get("key", f.name): f.name for f in fields(RunConfig)}

    @classmethod
    def _coerce(cls, attr: str, text: str):
        default = {f.name: f.default for f in fields(cls)}[attr]
        text = text.strip()
        try:
            if isinstance(default, bool):
                low = text.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                return low in ("true", "1", "yes")
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
            if isinstance(default, tuple):
                return tuple(float(v) for v in text.split(","))
            return text
        except ValueError:
            raise ConfigError(f"bad value for {attr}: {text!r}") from None

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        keys = cls.keys()
        unknown = sorted(set(pairs) - set(keys))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if "lambda" in pairs and "sigma2" in pairs and float(pairs["sigma2"]) > 0:
            raise ConfigError("set either lambda or sigma2, not both")
        values = {keys[k]: cls._coerce(keys[k], v) for k, v in pairs.items()}
        base = base or cls()
        if "lam" in values and "sigma2" not in values:
            values["sigma2"] = 0.0
        return replace(base, **values)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        pairs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
            k, v = line.split("=", 1)
            k = k.strip()
            if k in pairs:
                raise ConfigError(f"line {lineno}: duplicate key {k!r}")
            pairs[k] = v
        return cls.from_pairs(pairs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def items(self, include_paths: bool = True):
        for f in fields(self):
            if f.metadata.get("path") and not include_paths:
                continue
            if f.name == "lam" and self.sigma2 > 0:
                continue  # derived from sigma2
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            yield f.metadata.get("key", f.name), str(v)

    def to_text(self, include_paths: bool = True) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items(include_paths))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text(include_paths=False).encode()).hexdigest()[:16]

    # -- derived configs -----------------------------------------------------------------

    def model_config(self, n_nodes: int, in_features: int, target_index: int) -> ModelConfig:
        return ModelConfig(
            n_nodes=n_nodes, in_features=in_features, in_steps=self.in_steps,
            out_steps=self.out_steps, d_model=self.d_model, heads=self.heads, blocks=self.blocks,
            cheb_order=self.cheb_order, target_index=target_index, use_moran=self.use_moran,
            use_macro=self.use_macro, use_micro=self.use_micro,
            uncertainty=self.loss_mode == "uncertainty", macro_dim=self.macro_dim,
            micro_hidden=self.micro_hidden, head_hidden=self.head_hidden,
            aux_hidden=self.aux_hidden,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            lr_decay=self.lr_decay, rmsprop_alpha=self.rmsprop_alpha, epsilon=self.epsilon,
            max_epochs=self.max_epochs, max_steps=self.max_steps, patience=self.patience,
            seed=self.seed, loss_mode=self.loss_mode, lam=self.lam,
        )
