"""Run configuration: a flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    align.kind = m-tsa
    align.tau = 0.1
    mask.k = 20
    model.tap_layer = 2

Absent keys take their defaults; unknown keys, malformed values and
constraint violations raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import AlignmentLossKind
from .io import atomic_write


class ConfigError(ValueError):
    pass


@dataclass
class AlignConfig:
    kind: str = "m-tsa"
    tau: float = 0.1
    weight: float = 0.5
    t_max: int = 1000
    exclude_self: bool = False


@dataclass
class MaskConfig:
    k: float = 20.0
    patch: tuple = (2, 2, 2)


@dataclass
class ModelConfig:
    layers: int = 4
    hidden: int = 32
    tap_layer: int = 2
    kernel: int = 3
    activation: str = "tanh"
    emb_dim: int = 16
    seed: int = 11


@dataclass
class ProjectorConfig:
    hidden: int = 64
    seed: int = 12


@dataclass
class EncoderConfig:
    channels: int = 16
    hidden: int = 32
    patch: tuple = (2, 2, 2)
    seed: int = 1234


@dataclass
class DataConfig:
    scenes: int = 4
    frames: int = 8
    height: int = 16
    width: int = 16
    objects: int = 1
    bounce: bool = True
    latent_patch: tuple = (2, 2, 2)
    seed: int = 0


@dataclass
class ScheduleConfig:
    steps: int = 1000
    shift: float = 0.008


@dataclass
class OptimConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 2
    seed: int = 0
    checkpoint_every: int = 500
    smooth: int = 50


@dataclass
class EvalConfig:
    probe_t: tuple = (100, 300, 500)
    probe_seed: int = 99


@dataclass
class RunConfig:
    align: AlignConfig = field(default_factory=AlignConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    precision: str = "f64"

    def items(self):
        """Yield ``(dotted_key, value)`` pairs in a fixed order."""
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if dataclasses.is_dataclass(sub):
                for g in dataclasses.fields(sub):
                    yield f"{f.name}.{g.name}", getattr(sub, g.name)
            else:
                yield f.name, sub

    def get(self, key: str):
        obj = self
        for part in key.split("."):
            obj = getattr(obj, part)
        return obj

    def set(self, key: str, raw) -> None:
        """Set ``key`` from a string (or already typed) value, then validate."""
        known = dict(self.items())
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, raw, known[key]) if isinstance(raw, str) else raw
        *path, last = key.split(".")
        obj = self
        for part in path:
            obj = getattr(obj, part)
        setattr(obj, last, value)
        validate(self)

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self,
            **{
                f.name: dataclasses.replace(getattr(self, f.name))
                for f in dataclasses.fields(self)
                if dataclasses.is_dataclass(getattr(self, f.name))
            },
        )

    @property
    def kind(self) -> AlignmentLossKind:
        return AlignmentLossKind.parse(self.align.kind)


def _coerce(key: str, text: str, default):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(int(p) for p in parts)
        return text
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None


def _require(ok: bool, key: str, constraint: str, value) -> None:
    if not ok:
        raise ConfigError(f"{key} = {value!r} violates constraint {constraint}")


def validate(cfg: RunConfig) -> RunConfig:
    a, m, mo, d = cfg.align, cfg.mask, cfg.model, cfg.data
    try:
        AlignmentLossKind.parse(a.kind)
    except ValueError as exc:
        raise ConfigError(f"align.kind: {exc}") from None
    _require(a.tau > 0, "align.tau", "tau>0", a.tau)
    _require(a.weight >= 0, "align.weight", "weight>=0", a.weight)
    _require(1 <= a.t_max, "align.t_max", "t_max>=1", a.t_max)
    _require(0 < m.k <= 100, "mask.k", "0<k<=100", m.k)
    for key, patch in (("mask.patch", m.patch), ("encoder.patch", cfg.encoder.patch),
                       ("data.latent_patch", d.latent_patch)):
        _require(len(patch) == 3 and all(p >= 1 for p in patch), key,
                 "three positive sizes t,h,w", patch)
        _require(d.frames % patch[0] == 0 and d.height % patch[1] == 0
                 and d.width % patch[2] == 0, key,
                 "patch sizes divide data.frames/height/width", patch)
    _require(mo.layers >= 2, "model.layers", "layers>=2", mo.layers)
    _require(1 <= mo.tap_layer <= mo.layers, "model.tap_layer", "1<=tap_layer<=layers",
             mo.tap_layer)
    _require(mo.kernel >= 1 and mo.kernel % 2 == 1, "model.kernel", "odd kernel>=1", mo.kernel)
    _require(mo.activation in ("tanh", "linear"), "model.activation",
             "activation in {tanh, linear}", mo.activation)
    for key in ("model.hidden", "model.emb_dim", "projector.hidden", "encoder.channels",
                "encoder.hidden", "data.scenes", "data.frames", "data.height", "data.width",
                "data.objects", "schedule.steps", "train.batch", "train.smooth"):
        _require(cfg.get(key) >= 1, key, f"{key.split('.')[1]}>=1", cfg.get(key))
    lt = d.frames // d.latent_patch[0]
    _require(lt >= 2 or cfg.kind is not AlignmentLossKind.M_TSA, "data.frames",
             "at least two token frames for motion masking", d.frames)
    enc = tuple(n // p for n, p in zip((d.frames, d.height, d.width), cfg.encoder.patch))
    lat = tuple(n // p for n, p in zip((d.frames, d.height, d.width), d.latent_patch))
    _require(all(x % y == 0 for x, y in zip(lat, enc)), "encoder.patch",
             "encoder grid divides the latent grid", cfg.encoder.patch)
    _require(0 <= cfg.schedule.shift < 1, "schedule.shift", "0<=shift<1", cfg.schedule.shift)
    _require(cfg.optim.kind in ("adamw", "sgd"), "optim.kind", "kind in {adamw, sgd}",
             cfg.optim.kind)
    _require(cfg.optim.lr > 0, "optim.lr", "lr>0", cfg.optim.lr)
    _require(cfg.optim.weight_decay >= 0, "optim.weight_decay", "weight_decay>=0",
             cfg.optim.weight_decay)
    _require(0 <= cfg.optim.beta1 < 1 and 0 <= cfg.optim.beta2 < 1, "optim.beta1",
             "0<=beta<1", (cfg.optim.beta1, cfg.optim.beta2))
    _require(cfg.train.steps >= 1, "train.steps", "steps>=1", cfg.train.steps)
    _require(cfg.train.checkpoint_every >= 0, "train.checkpoint_every", "checkpoint_every>=0",
             cfg.train.checkpoint_every)
    _require(len(cfg.eval.probe_t) >= 1
             and all(1 <= t <= cfg.schedule.steps for t in cfg.eval.probe_t),
             "eval.probe_t", "1<=t<=schedule.steps", cfg.eval.probe_t)
    _require(cfg.precision in ("f32", "f64"), "precision", "precision in {f32, f64}",
             cfg.precision)
    return cfg


def parse_config_text(text: str, *, origin: str = "<string>") -> RunConfig:
    cfg = RunConfig()
    known = dict(cfg.items())
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        *path, last = key.split(".")
        obj = cfg
        for part in path:
            obj = getattr(obj, part)
        setattr(obj, last, _coerce(key, raw, known[key]))
    return validate(cfg)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), origin=str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def snapshot(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in cfg.items())


def write_snapshot(cfg: RunConfig, path) -> None:
    atomic_write(path, snapshot(cfg).encode())
