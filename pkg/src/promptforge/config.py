"""Model and training hyperparameters, and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

ABLATIONS = ("vgen", "tgen", "filter")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and method hyperparameters.

    Defaults are the ViT-B/16 settings used for base-to-novel transfer.
    ``lam`` is written ``lambda`` in config files.
    """

    d: int = 512
    d_v: int = 768
    d_l: int = 512
    L: int = 12
    heads: int = 8
    M_a: int = 196
    M_b: int = 77
    vocab: int = 49408
    K: int = 10
    a: int = 8
    b: int = 5
    J: int = 9
    N: int = 2
    lam: float = 1.0
    tau: float = 0.01
    seed: int = 0
    mlp_ratio: int = 4
    patch_dim: int = 768
    # comma-separated subset of ABLATIONS; "vgen,tgen" is the static-prompt (CoOp-like) mode
    ablate: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d", "d_v", "d_l", "L", "heads", "M_a", "M_b", "vocab", "K",
                     "a", "b", "J", "mlp_ratio", "patch_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.J <= self.L:
            raise ConfigError(f"need 1 <= J <= L, got J={self.J}, L={self.L}")
        if not 1 <= self.a <= self.K:
            raise ConfigError(f"need 1 <= a <= K, got a={self.a}, K={self.K}")
        if not 1 <= self.b < self.M_b:
            raise ConfigError(f"need 1 <= b < M_b, got b={self.b}, M_b={self.M_b}")
        if self.N < 0:
            raise ConfigError(f"N must be >= 0, got {self.N}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        for width in ("d_v", "d_l"):
            if getattr(self, width) % self.heads:
                raise ConfigError(f"{width}={getattr(self, width)} not divisible by heads={self.heads}")
        # pad id 0 plus b template ids must leave room for class-name tokens
        if self.vocab <= self.b + 1:
            raise ConfigError(f"vocab={self.vocab} too small for {self.b} template tokens")
        bad = set(self.ablated) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation(s) {sorted(bad)}; choose from {ABLATIONS}")

    @property
    def ablated(self) -> frozenset[str]:
        return frozenset(s.strip() for s in self.ablate.split(",") if s.strip())

    @property
    def gen_hidden(self) -> int:
        """Bottleneck width of the prompt generators (d/16, floored, at least 1)."""
        return max(1, self.d // 16)

    @property
    def name_len(self) -> int:
        """Token slots left for the class name after the b prompt slots."""
        return self.M_b - self.b

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.008
    epochs: int = 5
    batch: int = 4
    shots: int = 16
    noise: float = 0.1
    base_fraction: float = 0.5
    test_shots: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0 or self.batch < 1 or self.shots < 1 or self.test_shots < 1:
            raise ConfigError("epochs >= 0, batch >= 1, shots >= 1 and test_shots >= 1 required")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if not 0 < self.base_fraction < 1:
            raise ConfigError(f"base_fraction must be in (0, 1), got {self.base_fraction}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _key(field_name: str) -> str:
    return "lambda" if field_name == "lam" else field_name


def _field_map(cls) -> dict[str, dataclasses.Field]:
    return {_key(f.name): f for f in fields(cls)}


def _convert(raw: str, f: dataclasses.Field, key: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    model_keys, train_keys = _field_map(ModelConfig), _field_map(TrainConfig)
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in model_keys:
            f = model_keys[key]
            model_kw[f.name] = _convert(raw, f, key)
        elif key in train_keys:
            f = train_keys[key]
            train_kw[f.name] = _convert(raw, f, key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def format_config(cfg: ModelConfig, train: TrainConfig | None = None) -> str:
    """Canonical text: every key, in declaration order, one per line."""
    lines = [f"{_key(f.name)} = {getattr(cfg, f.name)}" for f in fields(ModelConfig)]
    if train is not None:
        lines += [f"{f.name} = {getattr(train, f.name)}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    """Read a config file; bare names like ``toy.cfg`` fall back to the bundled copies."""
    p = Path(path)
    if p.exists():
        return parse_config(p.read_text(encoding="utf-8"))
    bundled = resources.files("promptforge") / "configs" / p.name
    if p.parent == Path(".") and bundled.is_file():
        return parse_config(bundled.read_text(encoding="utf-8"))
    raise FileNotFoundError(f"config file not found: {path}")
