"""Experiment configuration: sectioned INI files mapped onto dataclasses.

Every key has a default.  Unknown sections or keys are rejected, and all
problems are reported together.  ``none`` is accepted for optional values.
"""
import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .device import DeviceModelParams

SCHEMA_VERSION = 1

PROFILES = ("full", "fast")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class ArrayConfig:
    scheme: str = "differential"
    g_scale: float = 8.0
    dac_bits: Optional[int] = 8
    adc_bits: Optional[int] = 8
    # None picks the scheme default (1.6/0.83 differential, 4.5/1.25 reference)
    init_mean: Optional[float] = None
    init_std: Optional[float] = None
    init_margin: float = 0.1
    init_max_iter: int = 20
    read_policy: str = "subset"
    read_subset_pairs: Optional[int] = 785
    g_range_low: float = 0.1
    g_range_high: float = 8.0
    # reference scheme: "network-mean" (all layers), "mean" (per array) or a level in uS
    reference: str = "network-mean"
    # None: 0.7, 0.85, 1.0 for the reference scheme, no clip for differential
    clip_schedule: Optional[tuple] = None
    refresh: bool = True
    refresh_period: int = 100
    refresh_g_high: float = 8.0
    refresh_g_diff: float = 6.0
    refresh_max_set: int = 3
    refresh_pulse_unit: float = 0.77
    refresh_distributed: bool = False

    def init_stats(self) -> tuple[float, float]:
        ref = self.scheme == "reference"
        mean = self.init_mean if self.init_mean is not None else (4.5 if ref else 1.6)
        std = self.init_std if self.init_std is not None else (1.25 if ref else 0.83)
        return mean, std

    def schedule(self) -> tuple:
        if self.clip_schedule is not None:
            return self.clip_schedule
        return (0.7, 0.85, 1.0) if self.scheme == "reference" else ()

    def clip_for_epoch(self, epoch: int) -> Optional[float]:
        sched = self.schedule()
        if not sched:
            return None
        return sched[min(epoch, len(sched)) - 1]


@dataclass
class OptimizerConfig:
    eps_p: float = 0.096
    eps_d: Optional[float] = None  # None: eps_p (differential) or 1.0 (reference)
    eta: float = 0.4
    momentum: float = 0.0
    batch_size: int = 1
    update_bits: Optional[int] = 8
    flush: str = "example"
    pulse_cap: Optional[int] = None

    def eps_d_for(self, scheme: str) -> float:
        if self.eps_d is not None:
            return self.eps_d
        return 1.0 if scheme == "reference" else self.eps_p


@dataclass
class NetworkConfig:
    sizes: tuple = (784, 250, 10)
    activation: str = "sigmoid"
    output_activation: str = "sigmoid"
    loss: str = "mse"
    mode: str = "mca"
    init_std: Optional[float] = None  # exact mode; None matches the MCA weight spread


@dataclass
class TrainerConfig:
    epochs: int = 30
    seed: int = 0
    dt_example: float = 0.1
    # arrays are programmed this many seconds before the first example
    init_settle_s: float = 3600.0
    eval_train: bool = True


@dataclass
class DataConfig:
    mnist_dir: Optional[str] = None
    n_train: Optional[int] = None
    n_test: Optional[int] = None


@dataclass
class OutputConfig:
    dir: str = "out"
    log_csv: str = "epochs.csv"
    checkpoint: str = "checkpoint.npz"


@dataclass
class TrainingConfig:
    model: DeviceModelParams = field(default_factory=DeviceModelParams)
    array: ArrayConfig = field(default_factory=ArrayConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    SECTIONS = ("model", "array", "optimizer", "network", "trainer", "data", "output")

    def validate(self):
        p = []
        a, o, n, t = self.array, self.optimizer, self.network, self.trainer
        if a.scheme not in ("differential", "reference"):
            p.append(f"array.scheme: unknown scheme {a.scheme!r}")
        if a.read_policy not in ("full", "subset", "cached"):
            p.append(f"array.read_policy: unknown policy {a.read_policy!r}")
        for k in ("dac_bits", "adc_bits"):
            b = getattr(a, k)
            if b is not None and not 2 <= b <= 16:
                p.append(f"array.{k}: must lie in [2, 16]")
        if any(not 0 < c <= 1 for c in a.schedule()):
            p.append("array.clip_schedule: entries must lie in (0, 1]")
        if a.reference not in ("mean", "network-mean"):
            try:
                float(a.reference)
            except ValueError:
                p.append("array.reference: must be 'network-mean', 'mean' or a conductance in uS")
        if o.eps_p <= 0 or (o.eps_d is not None and o.eps_d <= 0):
            p.append("optimizer: eps_p and eps_d must be > 0")
        if o.eta <= 0:
            p.append("optimizer.eta: must be > 0")
        if not 0 <= o.momentum < 1:
            p.append("optimizer.momentum: must lie in [0, 1)")
        if o.batch_size < 1:
            p.append("optimizer.batch_size: must be >= 1")
        if o.update_bits is not None and o.update_bits < 2:
            p.append("optimizer.update_bits: must be >= 2")
        if o.flush not in ("example", "batch"):
            p.append("optimizer.flush: must be 'example' or 'batch'")
        if n.mode not in ("mca", "exact"):
            p.append(f"network.mode: unknown mode {n.mode!r}")
        if len(n.sizes) < 2 or any(s < 1 for s in n.sizes):
            p.append("network.sizes: need at least two positive layer sizes")
        if n.loss not in ("mse", "cross-entropy"):
            p.append(f"network.loss: unsupported loss {n.loss!r}")
        if t.epochs < 1:
            p.append("trainer.epochs: must be >= 1")
        if t.dt_example <= 0:
            p.append("trainer.dt_example: must be > 0")
        if t.init_settle_s < 0:
            p.append("trainer.init_settle_s: must be >= 0")
        if p:
            raise ConfigError(p)
        return self

    # -- serialization ---------------------------------------------------

    def to_ini(self) -> str:
        lines = ["[meta]", f"schema_version = {SCHEMA_VERSION}", ""]
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            lines.append(f"[{sec}]")
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def replace(self, **sections) -> "TrainingConfig":
        """Copy with per-section overrides, e.g. ``replace(trainer={"epochs": 3})``."""
        kw = {}
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            kw[sec] = dataclasses.replace(obj, **sections.pop(sec, {}))
        if sections:
            raise ConfigError([f"unknown section {s!r}" for s in sections])
        return TrainingConfig(**kw).validate()


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, typ):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        inner = [a for a in typing.get_args(typ) if a is not type(None)][0]
        if text.strip().lower() in ("none", ""):
            return None
        return _parse_scalar(text, inner)
    if typ is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    if typ is tuple:
        parts = [s.strip() for s in text.split(",") if s.strip()]
        return tuple(int(s) if s.lstrip("-").isdigit() else float(s) for s in parts)
    return text.strip()


def _section_types(cls):
    return typing.get_type_hints(cls)


def profile_overrides(profile: str) -> dict:
    if profile == "full":
        return {}
    if profile == "fast":
        return {"network": {"sizes": (784, 64, 10)}, "trainer": {"epochs": 10},
                "data": {"n_train": 10000}}
    raise ConfigError([f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}"])


def from_mapping(values: dict[str, dict[str, str]], profile: str = "full") -> TrainingConfig:
    """Build a config from raw string values layered over profile defaults."""
    problems = []
    base = TrainingConfig().replace(**profile_overrides(profile))
    meta = values.get("meta", {})
    if "schema_version" in meta:
        try:
            v = int(meta["schema_version"])
        except ValueError:
            v = None
        if v != SCHEMA_VERSION:
            problems.append(f"meta.schema_version: expected {SCHEMA_VERSION}, got {meta['schema_version']!r}")
    for k in meta:
        if k != "schema_version":
            problems.append(f"meta.{k}: unknown key")
    updates = {}
    model_kw = {}
    for sec, items in values.items():
        if sec == "meta":
            continue
        if sec not in TrainingConfig.SECTIONS:
            problems.append(f"[{sec}]: unknown section")
            continue
        cls = type(getattr(base, sec))
        types = _section_types(cls)
        for key, raw in items.items():
            if key not in types:
                problems.append(f"{sec}.{key}: unknown key")
                continue
            try:
                val = _parse_scalar(raw, types[key])
            except ValueError as e:
                problems.append(f"{sec}.{key}: {e}")
                continue
            (model_kw if sec == "model" else updates.setdefault(sec, {}))[key] = val
    if problems:
        raise ConfigError(problems)
    try:
        if model_kw:
            updates["model"] = model_kw
        return base.replace(**updates)
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError([str(e)]) from e


def loads(text: str, profile: str = "full") -> TrainingConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError([f"syntax: {e}"]) from e
    return from_mapping({s: dict(cp[s]) for s in cp.sections()}, profile)


def load(path, profile: str = "full") -> TrainingConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError([f"cannot read {path}: {e.strerror}"]) from e
    return loads(text, profile)
