"""Plain-text run configuration.

A config file is an INI document with sections ``[stream]``, ``[model]``,
``[conjugation]``, ``[contrastive]``, ``[trainer]`` and ``[eval]``. Presets
shipped under ``flowfeat/presets`` cover the desk-scale acceptance stream and
the per-stream optimal parameter sets of the reference benchmark.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .conjugation import ConjugationCoefficients
from .contrastive import ContrastiveParams
from .hierarchy import LevelSpec
from .stream import StreamSpec, spec_from_items, spec_to_items
from .trainer import TrainerConfig


@dataclass
class ModelConfig:
    levels: int = 2
    feature_channels: int = 32
    base_width: int = 8
    depth: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class EvalConfig:
    tau_abstain: float = 0.3
    templates_per_object: int = 3
    template_spacing: int = 100
    template_laps: int = 5
    eval_laps: int = 1


@dataclass
class FullConfig:
    stream: StreamSpec = field(default_factory=StreamSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    conjugation: ConjugationCoefficients = field(default_factory=ConjugationCoefficients)
    contrastive: ContrastiveParams = field(default_factory=ContrastiveParams)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def build_level_specs(cfg: FullConfig) -> list[LevelSpec]:
    specs = []
    for level in range(1, cfg.model.levels + 1):
        in_ch = cfg.stream.channels if level == 1 else cfg.model.feature_channels
        specs.append(LevelSpec(level=level, in_channels=in_ch,
                               feature_channels=cfg.model.feature_channels,
                               base_width=cfg.model.base_width, depth=cfg.model.depth))
    return specs


# ---------------------------------------------------------------------------
# INI <-> dataclasses
# ---------------------------------------------------------------------------

_FLOAT_LIST_KEYS = ("lam_cur", "lam_skip", "lam_low")


def _parse_value(kind, text: str):
    text = text.strip()
    if kind is bool:
        return text.lower() in ("true", "1", "yes", "on")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _fill_dataclass(obj, section: configparser.SectionProxy):
    kwargs = {}
    for f in fields(obj):
        if f.name not in section:
            continue
        if f.name in _FLOAT_LIST_KEYS:
            kwargs[f.name] = [float(x) for x in section[f.name].split(",")]
        else:
            kind = {"alpha_f": float, "alpha_m": float, "xi": float}.get(f.name, type(getattr(obj, f.name)))
            value = section[f.name]
            if f.name in ("checkpoint_dir", "log_path", "directory"):
                kwargs[f.name] = value.strip() or None
            else:
                kwargs[f.name] = _parse_value(kind, value)
    return type(obj)(**{**{f.name: getattr(obj, f.name) for f in fields(obj)}, **kwargs})


def load_config(path: Path | str) -> FullConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = FullConfig()
    if parser.has_section("stream"):
        cfg.stream = spec_from_items(dict(parser.items("stream")))
    if parser.has_section("model"):
        cfg.model = _fill_dataclass(cfg.model, parser["model"])
    if parser.has_section("conjugation"):
        cfg.conjugation = _fill_dataclass(cfg.conjugation, parser["conjugation"])
    if parser.has_section("contrastive"):
        cfg.contrastive = _fill_dataclass(cfg.contrastive, parser["contrastive"])
    if parser.has_section("trainer"):
        cfg.trainer = _fill_dataclass(cfg.trainer, parser["trainer"])
    if parser.has_section("eval"):
        cfg.eval = _fill_dataclass(cfg.eval, parser["eval"])
    _validate(cfg)
    return cfg


def _validate(cfg: FullConfig) -> None:
    n = cfg.model.levels
    for key in _FLOAT_LIST_KEYS:
        values = getattr(cfg.conjugation, key)
        if len(values) < n:
            raise ValueError(f"conjugation {key} needs one value per level ({n})")


def _section_text(name: str, items: dict[str, str]) -> str:
    lines = [f"[{name}]"]
    lines += [f"{k} = {v}" for k, v in items.items()]
    return "\n".join(lines)


def _dataclass_items(obj, skip: tuple[str, ...] = ()) -> dict[str, str]:
    out = {}
    for f in fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        if value is None:
            continue
        if isinstance(value, list):
            out[f.name] = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, bool):
            out[f.name] = str(value).lower()
        else:
            out[f.name] = str(value)
    return out


def dump_config(cfg: FullConfig) -> str:
    sections = [
        _section_text("stream", spec_to_items(cfg.stream)),
        _section_text("model", _dataclass_items(cfg.model)),
        _section_text("conjugation", _dataclass_items(cfg.conjugation)),
        _section_text("contrastive", _dataclass_items(cfg.contrastive)),
        _section_text("trainer", _dataclass_items(cfg.trainer)),
        _section_text("eval", _dataclass_items(cfg.eval)),
    ]
    return "\n\n".join(sections) + "\n"


_RUNTIME_ONLY = ("checkpoint_every", "checkpoint_dir", "log_path", "log_every", "threads")


def config_hash(cfg: FullConfig) -> str:
    """Hash of everything that affects the learned weights; runtime knobs
    (paths, logging cadence, thread counts) are excluded so resuming a run
    from a different working directory stays legal."""
    text = "\n".join([
        _section_text("stream", spec_to_items(cfg.stream)),
        _section_text("model", _dataclass_items(cfg.model)),
        _section_text("conjugation", _dataclass_items(cfg.conjugation)),
        _section_text("contrastive", _dataclass_items(cfg.contrastive)),
        _section_text("trainer", _dataclass_items(cfg.trainer, skip=_RUNTIME_ONLY)),
    ])
    return hashlib.sha256(text.encode()).hexdigest()


def write_config(cfg: FullConfig, path: Path | str) -> None:
    Path(path).write_text(dump_config(cfg))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def list_presets() -> list[str]:
    pkg = resources.files("flowfeat") / "presets"
    return sorted(p.name[:-4] for p in pkg.iterdir() if p.name.endswith(".ini"))


def load_preset(name: str) -> FullConfig:
    pkg = resources.files("flowfeat") / "presets" / f"{name}.ini"
    if not pkg.is_file():
        raise FileNotFoundError(f"unknown preset {name!r}; available: {list_presets()}")
    with resources.as_file(pkg) as path:
        return load_config(path)
