"""Run configuration files: ``key = value`` lines under ``[section]`` headers.

``#`` starts a comment. Unknown sections or keys, malformed lines and values
that fail validation are reported as :class:`ConfigError` with the line
number. Defaults depend on the task, so ``[run] task`` is read first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .graph import RateRegConfig
from .neuron import NeuronParams
from .sim import SimConfig
from .train import DEFAULT_SYNAPSE, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def _opt_float(text: str):
    return None if text.lower() in ("none", "") else float(text)


def _opt_int(text: str):
    return None if text.lower() in ("none", "") else int(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


@dataclass(frozen=True)
class DataSection:
    n_samples: int = 800
    train_fraction: float = 0.9
    size: int = 64
    noise: float = 0.05
    cache_dir: str | None = None


@dataclass(frozen=True)
class NetworkSection:
    channels: tuple[int, ...] = (16, 32, 64)
    dense_units: tuple[int, ...] = (256, 64, 16, 4)


@dataclass(frozen=True)
class NeuronSection:
    tau_rc: float = 0.02
    tau_ref: float = 0.002
    v_th: float = 1.0
    gamma: float = 0.005
    amplitude: float = 0.01

    def params(self) -> NeuronParams:
        return NeuronParams(self.tau_rc, self.tau_ref, self.v_th, self.gamma, self.amplitude)


@dataclass(frozen=True)
class StageSection:
    """Training stage settings shared by ``[ann]`` and ``[hybrid]``."""

    epochs: int = 50
    lr: float = 0.01
    batch_size: int = 16
    patience: int | None = 3
    rate_reg: bool = False
    rate_target: float = 250.0
    rate_weight_output: float = 1.0
    rate_weight_hidden: float = 0.01
    n_steps: int = 50
    readout: str = "mean_last_k"
    k: int = 25


@dataclass(frozen=True)
class ConvertSection:
    synapse: float | None = DEFAULT_SYNAPSE
    scale: float | None = None


@dataclass(frozen=True)
class EvalSection:
    n_steps: int = 200
    readout: str = "mean_last_k"
    k: int = 100
    dt: float = 0.001


_SECTION_TYPES = {
    "data": DataSection, "network": NetworkSection, "neuron": NeuronSection,
    "ann": StageSection, "hybrid": StageSection, "convert": ConvertSection, "eval": EvalSection,
}

# field annotations are strings under postponed evaluation
_PARSERS = {"int": int, "float": float, "bool": _bool, "str": str, "int | None": _opt_int,
            "float | None": _opt_float, "str | None": lambda t: None if t.lower() == "none" else t,
            "tuple[int, ...]": _ints}


def _task_defaults(task: str) -> dict:
    if task == "locnet":
        return dict(
            data=DataSection(),
            network=NetworkSection(),
            neuron=NeuronSection(),
            ann=StageSection(epochs=30, lr=0.001, rate_reg=True, rate_weight_output=1e-6,
                             rate_weight_hidden=1e-8),
            # train on the same presentation time the evaluation uses: the
            # start-up transient of 9 cascaded layers differs at shorter rollouts
            hybrid=StageSection(epochs=1, lr=0.0003, batch_size=8, n_steps=200, k=100),
            convert=ConvertSection(),
            eval=EvalSection(),
        )
    if task == "cae":
        return dict(
            data=DataSection(n_samples=1000, size=32, noise=0.08),
            network=NetworkSection(channels=(16, 32), dense_units=()),
            neuron=NeuronSection(amplitude=1.0),
            ann=StageSection(epochs=30, lr=0.001),
            hybrid=StageSection(epochs=1, lr=0.0003, batch_size=8, n_steps=200, k=100),
            convert=ConvertSection(scale=1000.0),
            eval=EvalSection(),
        )
    raise ValueError(f"task must be 'locnet' or 'cae', got {task!r}")


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a pipeline run, grouped as in the config file."""

    task: str = "locnet"
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    neuron: NeuronSection = field(default_factory=NeuronSection)
    ann: StageSection = field(default_factory=StageSection)
    hybrid: StageSection = field(default_factory=StageSection)
    convert: ConvertSection = field(default_factory=ConvertSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def defaults(cls, task: str = "locnet", seed: int = 0) -> "RunConfig":
        return cls(task=task, seed=seed, **_task_defaults(task))

    @property
    def loss(self) -> str:
        return "mse" if self.task == "locnet" else "bce_dice"

    def neuron_params(self) -> NeuronParams:
        return self.neuron.params()

    def eval_sim(self) -> SimConfig:
        e = self.eval
        return SimConfig(dt=e.dt, n_steps=e.n_steps, readout=e.readout, k=e.k)

    def _stage_config(self, s: StageSection, hybrid: bool, n_layers: int) -> TrainConfig:
        reg = None
        if s.rate_reg:
            reg = RateRegConfig.for_layers(n_layers, s.rate_target, s.rate_weight_output,
                                           s.rate_weight_hidden)
        sim = SimConfig(dt=self.eval.dt, n_steps=s.n_steps, readout=s.readout, k=s.k)
        return TrainConfig(epochs=s.epochs, lr=s.lr, loss=self.loss, rate_reg=reg, hybrid=hybrid,
                           sim=sim, patience=s.patience, batch_size=s.batch_size, seed=self.seed)

    def ann_config(self, n_layers: int) -> TrainConfig:
        return self._stage_config(self.ann, False, n_layers)

    def hybrid_config(self, n_layers: int) -> TrainConfig:
        return self._stage_config(self.hybrid, True, n_layers)

    def validate(self) -> None:
        """Build every derived object once so bad values fail before any work starts."""
        self.neuron_params()
        self.eval_sim()
        self.ann_config(2)
        self.hybrid_config(2)
        if self.data.n_samples < 2:
            raise ValueError("data.n_samples must be >= 2")
        if not 0 < self.data.train_fraction < 1:
            raise ValueError("data.train_fraction must lie in (0, 1)")
        for name in ("synapse", "scale"):
            v = getattr(self.convert, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ValueError(f"convert.{name} must be > 0")
        if self.convert.scale is not None and self.convert.scale < 1:
            raise ValueError("convert.scale must be >= 1")


def _split_lines(text: str):
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield number, line


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    entries: list[tuple[int, str, str, str]] = []
    section = "run"
    for number, line in _split_lines(text):
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", number, source)
            section = line[1:-1].strip()
            if section != "run" and section not in _SECTION_TYPES:
                raise ConfigError(f"unknown section [{section}]", number, source)
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected 'key = value', got {line!r}", number, source)
        entries.append((number, section, key.strip(), value.strip()))

    task, task_line = "locnet", None
    for number, section, key, value in entries:
        if section == "run" and key == "task":
            task, task_line = value, number
    try:
        cfg = RunConfig.defaults(task)
    except ValueError as exc:
        raise ConfigError(str(exc), task_line, source) from None

    seen: dict[tuple[str, str], int] = {}
    for number, section, key, value in entries:
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[section, key]})",
                              number, source)
        seen[section, key] = number
        try:
            cfg = _apply(cfg, section, key, value)
        except KeyError:
            raise ConfigError(f"unknown key {key!r} in [{section}]", number, source) from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", number, source) from None
    try:
        cfg.validate()
    except ValueError as exc:
        number = _guess_line(str(exc), entries)
        raise ConfigError(str(exc), number, source) from None
    return cfg


def _apply(cfg: RunConfig, section: str, key: str, value: str) -> RunConfig:
    if section == "run":
        if key == "task":
            return cfg
        if key == "seed":
            return replace(cfg, seed=int(value))
        raise KeyError(key)
    sub = getattr(cfg, section)
    types = {f.name: f.type for f in fields(sub)}
    if key not in types:
        raise KeyError(key)
    parse = _PARSERS[types[key]]
    new = replace(sub, **{key: parse(value)})
    _check_section(section, new, key)
    return replace(cfg, **{section: new})


def _check_section(section: str, sub, key: str) -> None:
    # range checks that the downstream dataclasses would only catch later
    if section in ("ann", "hybrid"):
        value = getattr(sub, key)
        if key in ("epochs", "batch_size", "n_steps", "k") and value < 1:
            raise ValueError(f"{key} must be >= 1")
        if key == "lr" and not value >= 0:
            raise ValueError("lr must be >= 0")
        if key == "patience" and value is not None and value < 1:
            raise ValueError("patience must be >= 1")
    if section == "neuron":
        sub.params()


def _guess_line(message: str, entries) -> int | None:
    for number, section, key, _ in entries:
        if key in message:
            return number
    return None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return parse_config(text, str(path))


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config`."""

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return "none" if v is None else repr(v) if isinstance(v, float) else str(v)

    lines = ["[run]", f"task = {cfg.task}", f"seed = {cfg.seed}"]
    for name in _SECTION_TYPES:
        lines += ["", f"[{name}]"]
        sub = getattr(cfg, name)
        lines += [f"{f.name} = {fmt(getattr(sub, f.name))}" for f in fields(sub)]
    return "\n".join(lines) + "\n"
