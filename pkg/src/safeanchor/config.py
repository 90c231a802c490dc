"""Run configuration: JSON files with full defaulting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .tasks import AlignConfig, SuiteConfig

METHODS = (
    "safeanchor",
    "unconstrained",
    "ssi-only",
    "fisher-penalty",
    "strict-osca",
    "adaptive-osca",
    "+anchor",
    "+csm",
    "no-incremental-ssi",
    "interleave",
)

# Ablation rows in the order they build on each other.
TABLE4_METHODS = ("unconstrained", "ssi-only", "strict-osca", "adaptive-osca", "+anchor", "+csm", "no-incremental-ssi")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MethodFlags:
    ssi: bool = False
    mode: str = "off"
    anchor: bool = False
    csm: bool = False
    incremental: bool = False
    ewc: bool = False
    interleave: bool = False


def method_flags(method: str) -> MethodFlags:
    full = MethodFlags(ssi=True, mode="adaptive", anchor=True, csm=True, incremental=True)
    table = {
        "unconstrained": MethodFlags(),
        "ssi-only": MethodFlags(ssi=True, incremental=True),
        "strict-osca": MethodFlags(ssi=True, mode="strict", incremental=True),
        "adaptive-osca": MethodFlags(ssi=True, mode="adaptive", incremental=True),
        "+anchor": MethodFlags(ssi=True, mode="adaptive", anchor=True, incremental=True),
        "+csm": full,
        "safeanchor": full,
        "no-incremental-ssi": replace(full, incremental=False),
        "fisher-penalty": MethodFlags(ewc=True),
        "interleave": MethodFlags(interleave=True),
    }
    if method not in table:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return table[method]


@dataclass(frozen=True)
class RunConfig:
    method: str = "safeanchor"
    rho: float = 0.90
    tau: float = 0.05
    gamma: float = 0.1
    lam: float = 0.5
    beta: float = 1.0
    e_repair: int = 200
    n_s: int = 500
    learning_rate: float = 0.02
    epochs: int = 3
    batch_size: int = 16
    domains: int = 3
    ordering: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    reproducible: bool = False
    optimizer: str = "sgd"
    adam_projection: str = "update"
    trace_normalize: bool = False
    anchor_batch: int = 16
    anchor_full: bool = False
    kl_direction: str = "forward"
    ewc_lambda: float = 1.0
    interleave_ratio: float = 0.10
    classifier_noise: float = 0.0
    eig_backend: str = "lapack"
    replay_safety: str = "bypass"
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    align: AlignConfig = field(default_factory=AlignConfig)

    def __post_init__(self):
        method_flags(self.method)
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau must lie in [0, 1), got {self.tau}")
        for name in ("gamma", "lam", "beta", "ewc_lambda", "learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.e_repair < 0 or self.n_s < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("e_repair >= 0, n_s >= 1, epochs >= 0, batch_size >= 1 required")
        if not 1 <= self.domains <= self.suite.n_domain_pool:
            raise ConfigError(f"domains must be in [1, {self.suite.n_domain_pool}]")
        if self.kl_direction not in ("forward", "reverse"):
            raise ConfigError(f"kl_direction must be forward or reverse, got {self.kl_direction!r}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"optimizer must be sgd or adamw, got {self.optimizer!r}")
        if self.eig_backend not in ("lapack", "jacobi"):
            raise ConfigError(f"eig_backend must be lapack or jacobi, got {self.eig_backend!r}")
        if self.replay_safety not in ("bypass", "projected"):
            raise ConfigError(f"replay_safety must be bypass or projected, got {self.replay_safety!r}")
        if not 0.0 <= self.classifier_noise < 1.0:
            raise ConfigError("classifier_noise must lie in [0, 1)")

    @property
    def flags(self) -> MethodFlags:
        return method_flags(self.method)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "suite" in d:
            d["suite"] = _sub(SuiteConfig, d["suite"], "suite")
        if "align" in d:
            d["align"] = _sub(AlignConfig, d["align"], "align")
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def _sub(cls, d, name):
    if isinstance(d, cls):
        return d
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {', '.join(sorted(unknown))}")
    return cls(**d)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(data)
