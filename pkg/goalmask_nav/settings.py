"""
Run configuration files.

Every CLI subcommand takes an INI file with one section per component:

    [world]      MapParams
    [data]       DatasetConfig
    [model]      PolicyConfig
    [train]      TrainConfig
    [navigator]  NavigatorConfig
    [benchmark]  BenchmarkConfig
    [probe]      ProbeConfig

Keys are the dataclass field names. Missing sections and keys keep their
defaults; unknown sections or keys raise SettingsError. Tuple values are
comma-separated ("32, 64, 128"). Relative paths in [benchmark] and [probe]
are resolved against the run's output directory.
"""

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .benchmark import BenchmarkConfig
from .dataset import DatasetConfig
from .navigator import NavigatorConfig
from .policy import PolicyConfig
from .probe import ProbeConfig
from .training import TrainConfig
from .world import MapParams


SECTIONS = {
    "world": MapParams,
    "data": DatasetConfig,
    "model": PolicyConfig,
    "train": TrainConfig,
    "navigator": NavigatorConfig,
    "benchmark": BenchmarkConfig,
    "probe": ProbeConfig,
}
TRUE_VALUES = {"1", "true", "yes", "on"}
FALSE_VALUES = {"0", "false", "no", "off"}


class SettingsError(Exception):
    """Raised for unreadable run files, unknown keys or values of the wrong type."""
    pass


@dataclass(frozen=True)
class RunSettings:
    world: MapParams = field(default_factory=MapParams)
    data: DatasetConfig = field(default_factory=DatasetConfig)
    model: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    navigator: NavigatorConfig = field(default_factory=NavigatorConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def with_seed(self, seed: int) -> "RunSettings":
        return replace(
            self,
            data=replace(self.data, seed=seed),
            train=replace(self.train, seed=seed),
            benchmark=replace(self.benchmark, seed=seed),
            probe=replace(self.probe, seed=seed),
        )

    def resolved(self, out_dir: Union[str, Path]) -> "RunSettings":
        """Copy with relative artifact paths anchored at `out_dir`."""
        out_dir = Path(out_dir)

        def anchor(value: str) -> str:
            if not value or Path(value).is_absolute():
                return value
            return str(out_dir / value)

        bench = self.benchmark
        return replace(
            self,
            benchmark=replace(bench, **{name: anchor(getattr(bench, name)) for name in
                                        ("unified", "explore", "goal", "regression", "dataset", "out_dir")}),
            probe=replace(self.probe, checkpoint=anchor(self.probe.checkpoint), out_dir=anchor(self.probe.out_dir)),
        )


def coerce(value: str, kind: Any, where: str) -> Any:
    """Convert an INI string to the declared field type."""
    text = value.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in TRUE_VALUES:
                return True
            if lowered in FALSE_VALUES:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind in (int, float, str):
            return kind(text)
        origin = typing.get_origin(kind)
        if origin in (tuple, list):
            args = [a for a in typing.get_args(kind) if a is not Ellipsis] or [str]
            items = [coerce(part, args[0], where) for part in text.split(",") if part.strip()]
            return tuple(items) if origin is tuple else items
        if origin is typing.Union:
            inner = [a for a in typing.get_args(kind) if a is not type(None)]
            if text.lower() in ("", "none"):
                return None
            return coerce(text, inner[0], where)
    except ValueError as e:
        raise SettingsError(f"{where}: {e}") from e
    raise SettingsError(f"{where}: unsupported field type {kind}")


def section_config(cls, values: Dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            raise SettingsError(f"unknown key '{key}' in section [{section}]")
        kwargs[key] = coerce(raw, hints[key], f"[{section}] {key}")
    return cls(**kwargs)


def parse_settings(text: str, source: str = "<string>") -> RunSettings:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise SettingsError(f"{source}: {e}") from e
    built = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise SettingsError(f"{source}: unknown section [{section}]")
        built[section] = section_config(SECTIONS[section], dict(parser[section]), section)
    settings = RunSettings(**built)
    settings.world.validate()
    return settings


def load_settings(path: Union[str, Path], seed: Optional[int] = None) -> RunSettings:
    path = Path(path)
    if not path.exists():
        raise SettingsError(f"config file not found: {path}")
    settings = parse_settings(path.read_text(), str(path))
    return settings.with_seed(seed) if seed is not None else settings
