"""Run configuration files.

A run configuration is an INI-style file of ``key = value`` lines grouped
under ``[phantom]``, ``[model]``, ``[train]``, ``[sampler]``, ``[metrics]``
and ``[segmenter]``. Every key maps onto one field of one of the library's
frozen config dataclasses; missing keys take that dataclass's default.
Unknown sections, unknown keys and unparseable values are errors that name
the 1-based line they came from.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Tuple, Type

from .denoiser import Arch
from .errors import ConfigError, ValidationError
from .metrics import MetricsConfig
from .phantom import PhantomConfig
from .sampler import SamplerConfig
from .schedule import ScheduleConfig
from .segmenter import SegConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    """Dataset sizes, read from ``[phantom]``."""

    n_labeled: int = 200
    n_unlabeled: int = 2000

    def __post_init__(self) -> None:
        if self.n_labeled < 5 or self.n_unlabeled < 0:
            raise ValidationError("n_labeled must be >= 5 and n_unlabeled >= 0")


@dataclass(frozen=True)
class ModelInit:
    """Seed of the ``init`` stream, read from ``[model]``."""

    init_seed: int = 0


@dataclass(frozen=True)
class SampleCount:
    """How many pairs ``ddmm sample`` draws by default, read from ``[sampler]``."""

    n: int = 2000


# section -> [(RunConfig attribute, dataclass)]; keys route by field name
SECTIONS: Dict[str, List[Tuple[str, Type]]] = {
    "phantom": [("phantom", PhantomConfig), ("data", DataConfig)],
    "model": [("arch", Arch), ("schedule", ScheduleConfig), ("init", ModelInit)],
    "train": [("train", TrainConfig)],
    "sampler": [("sampler", SamplerConfig), ("sample_count", SampleCount)],
    "metrics": [("metrics", MetricsConfig)],
    "segmenter": [("segmenter", SegConfig)],
}

# fixed by the single-channel data model
HIDDEN = {("arch", "in_channels"), ("arch", "out_channels")}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    data: DataConfig = field(default_factory=DataConfig)
    arch: Arch = field(default_factory=Arch)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    init: ModelInit = field(default_factory=ModelInit)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sample_count: SampleCount = field(default_factory=SampleCount)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    segmenter: SegConfig = field(default_factory=SegConfig)

    def __post_init__(self) -> None:
        step = 2 ** self.arch.depth
        if self.phantom.size % step:
            raise ValidationError(f"phantom size {self.phantom.size} is not divisible by 2**depth = {step}")
        seg_step = 2 ** self.segmenter.depth
        if self.phantom.size % seg_step:
            raise ValidationError(f"phantom size {self.phantom.size} is not divisible by 2**segmenter depth = {seg_step}")

    def with_seed(self, seed: int) -> "RunConfig":
        """Apply a ``--seed`` override: phantom seed, init seed and sampler base seed."""
        return replace(
            self,
            phantom=replace(self.phantom, seed=seed),
            init=ModelInit(init_seed=seed),
            sampler=replace(self.sampler, base_seed=seed),
        )

    def dumps(self) -> str:
        """The fully resolved configuration in the input format, every key in a fixed order."""
        out: List[str] = []
        for section, parts in SECTIONS.items():
            out.append(f"[{section}]")
            for attr, _ in parts:
                obj = getattr(self, attr)
                for f in fields(obj):
                    if (attr, f.name) in HIDDEN:
                        continue
                    out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            out.append("")
        return "\n".join(out)

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        result: Dict[str, Dict[str, Any]] = {}
        for section, parts in SECTIONS.items():
            entries: Dict[str, Any] = {}
            for attr, _ in parts:
                obj = getattr(self, attr)
                for f in fields(obj):
                    if (attr, f.name) not in HIDDEN:
                        value = getattr(obj, f.name)
                        entries[f.name] = list(value) if isinstance(value, tuple) else value
            result[section] = entries
        return result


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, like: Any) -> Any:
    if isinstance(like, bool):
        lowered = text.strip().lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text.strip())
    if isinstance(like, float):
        return float(text.strip())
    return text.strip()


def _parse_value(text: str, default: Any) -> Any:
    if isinstance(default, tuple):
        items = [s for s in text.split(",")]
        if len(items) != len(default):
            raise ValueError(f"expected {len(default)} comma-separated values, got {len(items)}")
        return tuple(_parse_scalar(s, d) for s, d in zip(items, default))
    return _parse_scalar(text, default)


def _line_index(text: str) -> Tuple[Dict[str, int], Dict[Tuple[str, str], int]]:
    """Line numbers of section headers and of keys within them."""
    sections: Dict[str, int] = {}
    keys: Dict[Tuple[str, str], int] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1).strip()
            sections.setdefault(current, lineno)
            continue
        m = _KEY_RE.match(line)
        if m and current is not None and not line[:1].isspace():
            keys.setdefault((current, m.group(1).strip()), lineno)
    return sections, keys


def loads(text: str) -> RunConfig:
    """Parse a run configuration from a string."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # case-sensitive keys
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any [section]", e.lineno) from e
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigError(e.message.split(": ", 1)[-1], e.lineno) from e
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"cannot parse {line.strip()!r}", lineno) from e
    section_lines, key_lines = _line_index(text)

    values: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {list(SECTIONS)}", section_lines.get(section))
        routes = {}
        for attr, cls in SECTIONS[section]:
            for f in fields(cls):
                if (attr, f.name) not in HIDDEN:
                    routes[f.name] = attr
        for key, raw in parser.items(section):
            lineno = key_lines.get((section, key))
            if key not in routes:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
            attr = routes[key]
            default = getattr(getattr(RunConfig(), attr), key)
            try:
                values.setdefault(attr, {})[key] = _parse_value(raw, default)
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {e}", lineno) from e

    owner = {attr: section for section, parts in SECTIONS.items() for attr, _ in parts}
    built: Dict[str, Any] = {}
    for attr, overrides in values.items():
        base = getattr(RunConfig(), attr)
        try:
            built[attr] = replace(base, **overrides)
        except ValidationError as e:
            raise ConfigError(f"[{owner[attr]}] {e}", section_lines.get(owner[attr])) from e
    try:
        return RunConfig(**built)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load(path: Path) -> RunConfig:
    """Read a run configuration file; ``ConfigError`` messages carry the line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return loads(text)
