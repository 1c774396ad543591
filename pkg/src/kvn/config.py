"""JSON experiment configuration for the command-line interface."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from .dictionary import ConfigError
from .estimator import DEFAULT_TRUNCATION
from .systems import SYSTEMS

SOURCE_KINDS = ("samples", "quadrature", "trajectories")


@dataclass
class SourceConfig:
    kind: str = "samples"
    m: Optional[int] = 10000
    seed: int = 0
    grid: Optional[int] = None
    file: Optional[str] = None
    h: Optional[float] = None

    def validate(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(f"source.kind must be one of {SOURCE_KINDS} (got {self.kind!r})")
        if self.kind == "samples" and (self.m is None or self.m < 1):
            raise ConfigError(f"source.m must be >= 1 for sample assembly (got {self.m})")
        if self.kind == "quadrature" and (self.grid is None or self.grid < 2):
            raise ConfigError(f"source.grid must be >= 2 for quadrature assembly (got {self.grid})")
        if self.kind == "trajectories":
            if not self.file:
                raise ConfigError("source.file is required for trajectory assembly")
            if self.h is None or not self.h > 0:
                raise ConfigError(f"source.h must be positive (got {self.h})")


@dataclass
class SpectrumConfig:
    threshold: float = 1e-2
    route: str = "auto"  # auto | galerkin | skew
    eigenfunctions: list = field(default_factory=list)
    grid: int = 100


@dataclass
class PropagateConfig:
    times: list = field(default_factory=list)
    grid: int = 100
    initial: str = "default"  # default | lv_invariant
    fit_grid: int = 300
    particles: int = 0
    seed: int = 0


@dataclass
class CircuitConfig:
    t: float = 1.0
    format: str = "text"
    tol: float = 1e-8


@dataclass
class ConvergeConfig:
    m_exponents: list = field(default_factory=lambda: [2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0])
    seeds: int = 10
    master_seed: int = 0


@dataclass
class ExperimentConfig:
    system: str = "undamped_oscillator"
    basis: dict = field(default_factory=lambda: {"basis": "monomial", "max_degree": 2})
    source: SourceConfig = field(default_factory=SourceConfig)
    truncation: float = DEFAULT_TRUNCATION
    outputs: str = "out"
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)
    propagate: PropagateConfig = field(default_factory=PropagateConfig)
    circuit: CircuitConfig = field(default_factory=CircuitConfig)
    converge: ConvergeConfig = field(default_factory=ConvergeConfig)

    _SECTIONS = {
        "source": SourceConfig,
        "spectrum": SpectrumConfig,
        "propagate": PropagateConfig,
        "circuit": CircuitConfig,
        "converge": ConvergeConfig,
    }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {"system", "basis", "truncation", "outputs", *cls._SECTIONS}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            if key in cls._SECTIONS:
                section = cls._SECTIONS[key]
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                try:
                    kwargs[key] = section(**value)
                except TypeError as exc:
                    raise ConfigError(f"bad field in section {key!r}: {exc}") from None
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if not k.startswith("_")}

    def validate(self) -> None:
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; expected one of {sorted(SYSTEMS)}")
        if not isinstance(self.basis, dict) or self.basis.get("basis") not in ("monomial", "rff"):
            raise ConfigError("basis.basis must be 'monomial' or 'rff'")
        if not self.truncation > 0:
            raise ConfigError("truncation must be positive")
        self.source.validate()
        if self.spectrum.route not in ("auto", "galerkin", "skew"):
            raise ConfigError("spectrum.route must be auto, galerkin or skew")
        if self.circuit.format not in ("text", "qasm-lite"):
            raise ConfigError("circuit.format must be 'text' or 'qasm-lite'")
        if self.propagate.initial not in ("default", "lv_invariant"):
            raise ConfigError("propagate.initial must be 'default' or 'lv_invariant'")
        if self.converge.seeds < 1:
            raise ConfigError("converge.seeds must be >= 1")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)
