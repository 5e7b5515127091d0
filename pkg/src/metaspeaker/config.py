"""INI-style run configuration with [features], [episode], [encoder], [loss], [train].

Keys are the dataclass field names (``lambda`` for the loss weight). Unknown
sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from metaspeaker.encoder import EncoderConfig
from metaspeaker.errors import ConfigError
from metaspeaker.features import FeatureConfig
from metaspeaker.objective import LossConfig
from metaspeaker.sampler import EpisodeConfig
from metaspeaker.trainer import TrainConfig

SECTIONS = {
    "features": FeatureConfig,
    "episode": EpisodeConfig,
    "encoder": EncoderConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}
# ini key -> dataclass field, where they differ
_RENAMES = {"loss": {"lambda": "lam"}}


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.loss.mode != self.train.mode:
            raise ConfigError(f"[loss] mode {self.loss.mode!r} conflicts with [train] mode {self.train.mode!r}")
        if self.encoder.n_mels != self.features.n_mels:
            raise ConfigError(f"[encoder] n_mels {self.encoder.n_mels} != [features] n_mels {self.features.n_mels}")

    def with_overrides(self, mode: str | None = None, seed: int | None = None) -> "RunConfig":
        train, loss = self.train, self.loss
        if mode is not None:
            train = dataclasses.replace(train, mode=mode)
            loss = dataclasses.replace(loss, mode=mode)
        if seed is not None:
            train = dataclasses.replace(train, seed=seed)
        return dataclasses.replace(self, train=train, loss=loss)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            values = dataclasses.asdict(getattr(self, name))
            for ini_key, attr in _RENAMES.get(name, {}).items():
                values[ini_key] = values.pop(attr)
            out[name] = values
        return out

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(raw: str, annotation: str, where: str):
    text = raw.strip()
    base = annotation.split("|")[0].strip()
    try:
        if text.lower() == "none" and "None" in annotation:
            return None
        if base.startswith("tuple"):
            inner = float if "float" in base else int
            return tuple(inner(p) for p in text.split(",") if p.strip())
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {annotation}") from None
    return text


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}; expected {list(SECTIONS)}")
    parts = {}
    for name, cls in SECTIONS.items():
        fields = {f.name: f for f in dataclasses.fields(cls)}
        renames = _RENAMES.get(name, {})
        kwargs = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                attr = renames.get(key, key)
                if attr not in fields or (attr in renames.values() and key not in renames):
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                f = fields[attr]
                kwargs[attr] = _coerce(raw, str(f.type), f"{source} [{name}] {key}")
        try:
            parts[name] = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{source} [{name}]: {exc}") from None
    # a mode given in only one of [loss] / [train] applies to both
    loss_has = parser.has_option("loss", "mode") if parser.has_section("loss") else False
    train_has = parser.has_option("train", "mode") if parser.has_section("train") else False
    if loss_has and not train_has:
        parts["train"] = dataclasses.replace(parts["train"], mode=parts["loss"].mode)
    elif train_has and not loss_has:
        parts["loss"] = dataclasses.replace(parts["loss"], mode=parts["train"].mode)
    return RunConfig(**parts)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
