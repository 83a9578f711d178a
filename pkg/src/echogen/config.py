"""Run configuration: dataclasses for every subsystem plus lossless
round-tripping through an INI-style key-value text file."""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .objectives import LossConfig

__all__ = [
    "DataConfig",
    "TrainConfig",
    "SamplerConfig",
    "EvalConfig",
    "RunConfig",
    "paper_scale_config",
]


@dataclass(frozen=True)
class DataConfig:
    """Synthetic dataset shape and rendering geometry (desk scale)."""

    n_videos: int = 512
    capacity: int = 8
    height: int = 16
    width: int = 16
    channels: int = 1
    f_min: int = 4
    f_max: int = 8
    ef_min: float = 0.1
    ef_max: float = 0.8
    a: float = 5.5
    b_ed: float = 4.5
    ring: float = 1.9
    noise_sigma: float = 0.1
    tau: float = 0.35

    def __post_init__(self):
        # f_max may exceed capacity: longer sequences get downsampled
        if not 2 <= self.f_min <= self.f_max:
            raise ValueError("need 2 <= f_min <= f_max")
        if not 0.0 <= self.ef_min <= self.ef_max < 1.0:
            raise ValueError("need 0 <= ef_min <= ef_max < 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 4
    lr: float = 1e-3
    lr_min: float = 1e-5
    pmf: float = 1.0
    cfg_dropout: float = 0.0
    ckpt_every: int = 0  # epochs between checkpoints; 0 = final only
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ValueError("cfg_dropout must lie in [0,1)")


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "one_step"  # one_step | interval | euler | cfg
    steps: int = 1
    guidance: float = 2.0

    def __post_init__(self):
        if self.method not in ("one_step", "interval", "euler", "cfg"):
            raise ValueError(f"unknown sampler method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    task: str = "gen"
    pmf: float = 1.0
    n_items: int = 128
    rs: int = 1
    gen_ef_min: float = 0.0
    gen_ef_max: float = 1.0
    min_gap: float = 0.05

    def __post_init__(self):
        if self.task not in ("rec", "gen"):
            raise ValueError("task must be 'rec' or 'gen'")
        if self.rs < 1:
            raise ValueError("rs must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- serialization ------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": repr(self.seed), "out_dir": self.out_dir}
        for section, cfg in self._sections().items():
            cp[section] = {k: _fmt(v) for k, v in asdict(cfg).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def _sections(self) -> dict:
        return {
            "data": self.data,
            "model": self.model,
            "loss": self.loss,
            "train": self.train,
            "sampler": self.sampler,
            "eval": self.eval,
        }

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        classes = {
            "data": DataConfig,
            "model": ModelConfig,
            "loss": LossConfig,
            "train": TrainConfig,
            "sampler": SamplerConfig,
            "eval": EvalConfig,
        }
        kwargs = {}
        if cp.has_section("run"):
            kwargs["seed"] = int(cp["run"].get("seed", "0"))
            kwargs["out_dir"] = cp["run"].get("out_dir", "runs/default")
        for section, klass in classes.items():
            if not cp.has_section(section):
                continue
            raw = dict(cp[section])
            parsed = {}
            for f in fields(klass):
                if f.name not in raw:
                    continue
                parsed[f.name] = _parse(raw[f.name], f.type)
            kwargs[section] = klass(**parsed)
        return cls(**kwargs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, type_hint: str):
    hint = str(type_hint)
    if "tuple" in hint:
        return tuple(int(x) for x in text.split(","))
    if "int" in hint:
        return int(text)
    if "float" in hint:
        return float(text)
    if "str" in hint:
        return text
    raise ValueError(f"cannot parse field of type {type_hint!r}")


def paper_scale_config() -> RunConfig:
    """Full-scale reference preset (documented, not CPU-runnable here):
    F=32 capacity, 112x112 frames, four-level widths, 1000 epochs at the
    published initial learning rate."""
    return RunConfig(
        data=DataConfig(
            n_videos=800,
            capacity=32,
            height=112,
            width=112,
            f_min=10,
            f_max=42,
            a=40.0,
            b_ed=32.0,
            ring=10.0,
        ),
        model=ModelConfig(channels=(128, 128, 256, 256), capacity=32, embed_dim=256),
        train=TrainConfig(epochs=1000, batch_size=2, lr=5e-5, lr_min=5e-7),
    )
