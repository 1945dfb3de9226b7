"""Run configuration: one TOML file with [encoder], [clmsa], [bmmc], [train]
and [eval] sections.  Unknown sections or keys are rejected."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .bmmc import BmmcConfig
from .clmsa import ClmsaConfig
from .encoder import EncoderConfig, PretrainConfig
from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class TrainConfig:
    # defaults follow the reference fine-tuning recipe; desk runs usually raise lr
    batch_size: int = 16
    lr: float = 2e-5
    weight_decay: float = 1e-4
    epochs: int = 10
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    use_ip: bool = True
    # tokenizer and pretraining
    vocab_size: int = 512
    pretrain_steps: int = 200
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 16
    mask_rate: float = 0.15
    lam: float = 1.0
    tau: float = 0.1
    teacher_ema: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(r) for r in self.split))
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError(f"invalid training settings: batch {self.batch_size}, epochs {self.epochs}, lr {self.lr}")

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(lam=self.lam, tau=self.tau, mask_rate=self.mask_rate, lr=self.pretrain_lr,
                              weight_decay=self.weight_decay, batch_size=self.pretrain_batch_size,
                              epochs=self.pretrain_epochs, max_steps=self.pretrain_steps,
                              teacher_ema=self.teacher_ema)


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    fpr_levels: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)

    def __post_init__(self):
        object.__setattr__(self, "fpr_levels", tuple(float(x) for x in self.fpr_levels))


SECTIONS = {"encoder": EncoderConfig, "clmsa": ClmsaConfig, "bmmc": BmmcConfig,
            "train": TrainConfig, "eval": EvalConfig}


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    clmsa: ClmsaConfig = field(default_factory=ClmsaConfig.desk)
    bmmc: BmmcConfig = field(default_factory=BmmcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sect = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sect.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, klass in SECTIONS.items():
            values = dict(data.get(name, {}))
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            try:
                sections[name] = klass(**values)
            except TypeError as exc:
                raise ConfigError(f"bad values in [{name}]: {exc}") from exc
        return cls(**sections)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            with Path(path).open("rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def to_toml(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in values.items():
                if v is None:
                    continue
                lines.append(f"{k} = {_toml_value(v)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def full_preset(vocab_size: int = 512) -> RunConfig:
    return RunConfig(encoder=EncoderConfig.full(vocab_size), clmsa=ClmsaConfig.full())
