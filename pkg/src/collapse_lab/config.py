"""Experiment configuration: flat ``section.key = value`` text files.

Lines starting with ``#`` and blank lines are ignored.  Every key has a
default; unknown sections or keys are rejected.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "parse_lr_schedule"]


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.key = key
        self.line = line


@dataclass
class DataSection:
    source: str = "generated"
    q: int = 3
    d: int = 10
    m: int = 20
    tau: float = 0.2
    M: Optional[float] = None
    seed: int = 0
    m_test: int = 100
    path: str = ""
    test_path: str = ""
    normalize: bool = False
    force: bool = False


@dataclass
class ModelSection:
    p: int = 8
    N: int = 512
    activation: str = "sigmoid"
    trunc_R: Optional[float] = None
    trunc_C0: float = 1.0


@dataclass
class HyperSection:
    # None means "equal to beta_inv" (or 1e-4 for repro runs)
    lambda_rho: Optional[float] = None
    lambda_w: Optional[float] = None
    beta_inv: float = 1e-4
    gamma: float = 1.0
    eta: float = 1.0
    seed: int = 0
    freeze_w: bool = False


@dataclass
class ScheduleSection:
    steps: int = 2000
    stage1_steps: int = 1000
    stage2_steps: int = 2000
    log_every: int = 100
    lr_schedule: str = ""
    batch: Optional[int] = None
    stage1_eps: float = 0.0


@dataclass
class AlgorithmSection:
    kind: str = "two_stage"


@dataclass
class OutputsSection:
    dir: str = "out"
    emit_svg: bool = True
    log_y: bool = True
    checkpoint: bool = True


@dataclass
class TheorySection:
    enabled: str = "theorem31,lemma34,kernel,flow_constants,test_bound"
    kernel_probes: int = 4096
    delta0: float = 0.1
    delta: float = 0.1


@dataclass
class RunSection:
    workers: int = 1
    diagnostics: bool = True


@dataclass
class ReproSection:
    seeds: int = 4
    jobs: int = 1


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    hyper: HyperSection = field(default_factory=HyperSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    algorithm: AlgorithmSection = field(default_factory=AlgorithmSection)
    outputs: OutputsSection = field(default_factory=OutputsSection)
    theory_checks: TheorySection = field(default_factory=TheorySection)
    run: RunSection = field(default_factory=RunSection)
    repro: ReproSection = field(default_factory=ReproSection)
    explicit: Tuple[str, ...] = ()

    def checks(self) -> List[str]:
        raw = self.theory_checks.enabled.strip()
        if raw.lower() in ("", "none"):
            return []
        return [c.strip() for c in raw.split(",") if c.strip()]

    def validate(self) -> None:
        if self.data.source not in ("generated", "csv"):
            raise ConfigError(f"data.source must be 'generated' or 'csv', got {self.data.source!r}", "data.source")
        if self.data.source == "csv" and not self.data.path:
            raise ConfigError("data.path is required when data.source = csv", "data.path")
        if self.algorithm.kind not in ("two_stage", "joint_flow"):
            raise ConfigError(
                f"algorithm.kind must be 'two_stage' or 'joint_flow', got {self.algorithm.kind!r}", "algorithm.kind"
            )
        if self.model.activation.lower() not in ("sigmoid", "tanh"):
            raise ConfigError(f"model.activation must be sigmoid or tanh, got {self.model.activation!r}",
                              "model.activation")
        if self.schedule.log_every < 1:
            raise ConfigError("schedule.log_every must be >= 1", "schedule.log_every")
        known = {"theorem31", "lemma34", "kernel", "flow_constants", "test_bound"}
        for c in self.checks():
            if c not in known:
                raise ConfigError(f"unknown theory check {c!r}", "theory_checks.enabled")
        parse_lr_schedule(self.schedule.lr_schedule)


def parse_lr_schedule(text: str):
    """``"0:0.001, 500:0.01"`` -> ((0, 0.001), (500, 0.01))."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            s, e = item.split(":")
            out.append((int(s), float(e)))
        except ValueError:
            raise ConfigError(f"bad lr_schedule entry {item!r}; expected step:eta", "schedule.lr_schedule") from None
    return tuple(sorted(out))


def _coerce(raw: str, ftype, key: str):
    text = raw.strip()
    optional = getattr(ftype, "__origin__", None) is not None and type(None) in ftype.__args__
    if optional:
        if text.lower() in ("none", "auto", ""):
            return None
        ftype = next(a for a in ftype.__args__ if a is not type(None))
    try:
        if ftype is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {ftype.__name__})", key) from None


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg) if f.name != "explicit"}
    seen = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"unknown key {key!r} (keys look like section.name)", key, lineno)
        sec, name = key.split(".", 1)
        if sec not in sections:
            raise ConfigError(f"unknown key {key!r}", key, lineno)
        obj = getattr(cfg, sec)
        ftypes = {f.name: f.type for f in dataclasses.fields(obj)}
        if name not in ftypes:
            raise ConfigError(f"unknown key {key!r}", key, lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", key, lineno)
        seen.append(key)
        setattr(obj, name, _coerce(value, ftypes[name], key))
    cfg.explicit = tuple(seen)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
