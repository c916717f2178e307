"""Experiment configuration files.

The format is flat ``key = value`` lines grouped under ``[section]``
headers; ``#`` starts a comment. Every value remembers the line it came
from so that a bad key or value can be reported precisely.

Recognized sections::

    [data]      generator = standard | shapes | gaussian, or path = FILE;
                seed, k, n_per_domain, dim, spread
    [domain.N]  background, foreground (3 numbers each), noise, gradient,
                n_samples, shift, ratio, center, width
    [train]     preset = default | standard, methods and seeds (comma
                separated), plus any other TrainConfig field
    [sweep]     gammas (comma separated)
    [probe]     k_neighbors, domains = source | targets | all
    [output]    dir, plot = true | false
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import (
    DomainSpec,
    LabelShiftSpec,
    STANDARD_STYLES,
    Style,
    load_dataset,
    make_blended_shapes,
    make_gaussian_domains,
    resample_label_shift,
    standard_benchmark,
)
from .errors import LabError, StorageError
from .mcda import TrainConfig

_SECTION = re.compile(r"^\[([A-Za-z_][\w.]*)\]$")
_KEYVAL = re.compile(r"^([A-Za-z_]\w*)\s*=\s*(.*)$")

_KEYS = {
    "data": {"generator", "path", "seed", "k", "n_per_domain", "dim", "spread"},
    "domain": {"background", "foreground", "noise", "gradient", "n_samples", "shift", "ratio",
               "center", "width"},
    "train": {"preset", "methods", "seeds"} | {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "method"},
    "sweep": {"gammas"},
    "probe": {"k_neighbors", "domains"},
    "output": {"dir", "plot"},
}


class ConfigError(LabError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__("E_CONFIG", prefix + message)
        self.line = line


@dataclass
class RawConfig:
    """Parsed sections: ``{section: {key: (value, line)}}``."""

    sections: dict[str, dict[str, tuple[str, int]]] = field(default_factory=dict)

    def section(self, name: str) -> dict[str, tuple[str, int]]:
        return self.sections.get(name, {})

    def get(self, section: str, key: str, conv=str, default=None):
        entry = self.section(section).get(key)
        if entry is None:
            return default
        value, line = entry
        try:
            return conv(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {value!r} ({exc})", line) from exc


def parse_config(text: str) -> RawConfig:
    cfg = RawConfig()
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            current = m.group(1)
            kind = current.split(".", 1)[0]
            if kind not in _KEYS or (kind == "domain") != ("." in current):
                raise ConfigError(f"unknown section [{current}]", lineno)
            if kind == "domain" and not current.split(".", 1)[1].isdigit():
                raise ConfigError(f"domain sections are [domain.N], got [{current}]", lineno)
            if current in cfg.sections:
                raise ConfigError(f"section [{current}] repeated", lineno)
            cfg.sections[current] = {}
            continue
        m = _KEYVAL.match(line)
        if not m:
            raise ConfigError(f"expected 'key = value' or '[section]', got {line!r}", lineno)
        if current is None:
            raise ConfigError("key outside of any section", lineno)
        key, value = m.group(1), m.group(2).strip()
        if key not in _KEYS[current.split(".", 1)[0]]:
            raise ConfigError(f"unknown key {key!r} in [{current}]", lineno)
        if key in cfg.sections[current]:
            raise ConfigError(f"key {key!r} repeated in [{current}]", lineno)
        cfg.sections[current][key] = (value, lineno)
    return cfg


def read_config(path: str | Path | None) -> RawConfig:
    if path is None:
        return RawConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError("E_IO", f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def parse_floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def parse_names(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def parse_ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def parse_bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _domain_spec(cfg: RawConfig, name: str, k: int, n_default: int) -> tuple[DomainSpec, LabelShiftSpec]:
    dom = int(name.split(".", 1)[1])
    get = lambda key, conv, default: cfg.get(name, key, conv, default)  # noqa: E731
    base = STANDARD_STYLES[min(dom, len(STANDARD_STYLES) - 1)]
    try:
        style = Style(get("background", parse_floats, base.background),
                      get("foreground", parse_floats, base.foreground),
                      noise=get("noise", float, base.noise), gradient=get("gradient", float, base.gradient))
        shift = LabelShiftSpec(get("shift", str, "uniform"), ratio=get("ratio", float, 0.5),
                               center=get("center", float, (k - 1) / 2), width=get("width", float, 1.0))
        shift.prior(k)
    except LabError as exc:
        line = next(iter(cfg.section(name).values()), (None, None))[1]
        raise ConfigError(f"[{name}]: {exc.message}", line) from exc
    uniform = tuple([1.0 / k] * k)
    return DomainSpec(dom, style, get("n_samples", int, n_default), uniform), shift


def build_dataset(cfg: RawConfig):
    """Load or generate the dataset a config describes."""
    path = cfg.get("data", "path")
    if path is not None:
        return load_dataset(path)
    generator = cfg.get("data", "generator", str, "standard")
    seed = cfg.get("data", "seed", int, 0)
    k = cfg.get("data", "k", int, 4)
    n = cfg.get("data", "n_per_domain", int, 800)
    if generator == "standard":
        return standard_benchmark(seed=seed, n_per_domain=n, k=k)
    if generator not in ("shapes", "gaussian"):
        line = cfg.section("data")["generator"][1]
        raise ConfigError(f"generator must be standard, shapes or gaussian, got {generator!r}", line)
    names = sorted((s for s in cfg.sections if s.startswith("domain.")), key=lambda s: int(s.split(".")[1]))
    if not names:
        raise ConfigError(f"generator {generator!r} needs [domain.N] sections")
    if [int(s.split(".")[1]) for s in names] != list(range(len(names))):
        raise ConfigError("domain sections must be numbered 0, 1, 2, ... without gaps")
    pairs = [_domain_spec(cfg, s, k, n) for s in names]
    specs = [p[0] for p in pairs]
    if generator == "shapes":
        ds = make_blended_shapes(specs, k, seed)
    else:
        ds = make_gaussian_domains(specs, k, seed, d=cfg.get("data", "dim", int, 2),
                                   spread=cfg.get("data", "spread", float, 0.5))
    for spec, shift in pairs:
        if shift.kind != "uniform":
            ds = resample_label_shift(ds, spec.domain_id, shift, seed)
    return ds


def build_train_config(cfg: RawConfig, presets: dict[str, TrainConfig], method: str | None = None,
                       method_overrides: dict[str, dict[str, dict]] | None = None) -> TrainConfig:
    """Preset, then the preset's adjustments for ``method``, then the [train] keys."""
    section = cfg.section("train")
    preset = cfg.get("train", "preset", str, "default")
    if preset not in presets:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(presets)}", section["preset"][1])
    base = presets[preset]
    if method is not None:
        extra = (method_overrides or {}).get(preset, {}).get(method, {})
        base = dataclasses.replace(base, method=method, **extra)
    kwargs = {}
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for key, (value, line) in section.items():
        if key in ("preset", "methods", "seeds"):
            continue
        t = str(types[key])
        try:
            if "bool" in t:
                kwargs[key] = None if value.lower() == "none" else parse_bool(value)
            elif "int" in t:
                kwargs[key] = None if value.lower() == "none" else int(value)
            elif "float" in t:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise ConfigError(f"bad value for train.{key}: {value!r}", line) from exc
    return dataclasses.replace(base, **kwargs)
