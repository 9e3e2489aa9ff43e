"""INI run configuration with sections [model] [adapter] [train] [data] [eval].

Keys map one-to-one onto the typed configs; unknown keys and sections are
errors. ``to_ini`` renders the fully resolved configuration, and parsing
that text gives back an equal RunConfig.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import GenSpec
from .numcore import ConfigurationError
from .peft import AdapterConfig, Mode, parse_mode
from .samarch import ModelConfig, PRESETS, preset
from .traineng import TrainConfig

SECTIONS = ("model", "adapter", "train", "data", "eval")


def default_cache_dir() -> str:
    return os.environ.get("PTSAM_CACHE", str(Path.home() / ".cache" / "ptsam"))


@dataclass
class DataConfig:
    corpus: str = ""  # corpus directory; empty means generate from ``gen``
    gen: GenSpec = field(default_factory=GenSpec)
    corpus_seed: int = 0
    train_n: int = 16
    split_seed: int = 0
    test_frac: float = 0.2


@dataclass
class EvalConfig:
    methods: tuple[str, ...] = tuple(m.value for m in Mode)
    train_sizes: tuple[int, ...] = (16, 32, 64)
    seeds: tuple[int, ...] = (0, 1, 2)
    jobs: int = 1
    dataset: str = "synthetic"
    ablate: str = "both"
    ablate_values: tuple[int, ...] = (0, 1, 2, 4, 8, 16, 32)
    ablate_train_n: int = 16
    threshold: float = 0.5


@dataclass
class RunConfig:
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    base: str = "pretrained"  # none | pretrained | path to a full checkpoint
    base_cache: str = field(default_factory=default_cache_dir)
    adapter: AdapterConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def require_adapter(self) -> AdapterConfig:
        if self.adapter is None:
            raise ConfigurationError("missing key [adapter] mode")
        return self.adapter

    def method_configs(self) -> list[AdapterConfig]:
        """One AdapterConfig per [eval] method, sharing the [adapter] sizes."""
        a = self.adapter or AdapterConfig()
        return [dataclasses.replace(a, mode=parse_mode(m)).validate() for m in self.eval.methods]

    def to_ini(self) -> str:
        lines = ["[model]", f"preset = {self.preset}", f"base = {self.base}", f"base_cache = {self.base_cache}"]
        lines += _render_fields(self.model)
        lines += ["", "[adapter]"]
        if self.adapter is not None:
            lines += _render_fields(self.adapter)
        lines += ["", "[train]"] + _render_fields(self.train)
        d = self.data
        lines += ["", "[data]", f"corpus = {d.corpus}", f"corpus_seed = {d.corpus_seed}", f"train_n = {d.train_n}",
                  f"split_seed = {d.split_seed}", f"test_frac = {d.test_frac!r}"]
        lines += _render_fields(d.gen)
        lines += ["", "[eval]"] + _render_fields(self.eval)
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- parsing


def _render_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, Mode):
        return v.value
    if isinstance(v, (tuple, list)):
        return ",".join(_render_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _render_fields(obj) -> list[str]:
    return [f"{f.name} = {_render_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def _coerce(section: str, key: str, raw: str, type_str: str, default):
    raw = raw.strip()
    where = f"[{section}] {key}"
    try:
        if "None" in type_str and raw.lower() in ("none", ""):
            return None
        if type_str.startswith("tuple"):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if "float" in type_str:
                return tuple(float(x) for x in items)
            if "int" in type_str:
                return tuple(int(x) for x in items)
            return tuple(items)
        if type_str.startswith("bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if type_str.startswith("int"):
            return int(raw)
        if type_str.startswith("float"):
            return float(raw)
        if type_str == "Mode":
            return parse_mode(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {raw!r} as {type_str}") from None


def _fill(cls, section: str, items: dict[str, str], base=None):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    base = base if base is not None else cls()
    kw = {}
    for key, raw in items.items():
        if key not in types:
            raise ConfigurationError(f"unknown key [{section}] {key}")
        kw[key] = _coerce(section, key, raw, types[key], getattr(base, key, None))
    try:
        return dataclasses.replace(base, **kw)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from None


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keep key case so typos are caught exactly
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigurationError(f"unknown section [{sec}] in {source}")
    sect = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SECTIONS}
    rc = RunConfig()

    m = dict(sect["model"])
    rc.preset = m.pop("preset", rc.preset)
    if rc.preset not in PRESETS:
        raise ConfigurationError(f"[model] preset: unknown preset {rc.preset!r}; choose from {sorted(PRESETS)}")
    rc.base = m.pop("base", rc.base).strip()
    rc.base_cache = m.pop("base_cache", rc.base_cache).strip()
    rc.model = _fill(ModelConfig, "model", m, base=preset(rc.preset)).validate()

    a = sect["adapter"]
    if a:
        if "mode" not in a:
            raise ConfigurationError("missing key [adapter] mode")
        rc.adapter = _fill(AdapterConfig, "adapter", a, base=AdapterConfig(mode=parse_mode(a["mode"]))).validate()

    rc.train = _fill(TrainConfig, "train", sect["train"]).validate()

    d = dict(sect["data"])
    own = {k: d.pop(k) for k in ("corpus", "corpus_seed", "train_n", "split_seed", "test_frac") if k in d}
    gen = _fill(GenSpec, "data", d)
    rc.data = dataclasses.replace(_fill(DataConfig, "data", own), gen=gen)
    if not 0.0 <= rc.data.test_frac < 1.0:
        raise ConfigurationError(f"[data] test_frac must be in [0, 1), got {rc.data.test_frac}")

    rc.eval = _fill(EvalConfig, "eval", sect["eval"])
    for mname in rc.eval.methods:
        parse_mode(mname)
    if rc.eval.ablate not in ("n_md", "n_ie", "both"):
        raise ConfigurationError(f"[eval] ablate must be n_md, n_ie or both, got {rc.eval.ablate!r}")
    if rc.eval.jobs < 1:
        raise ConfigurationError("[eval] jobs must be >= 1")
    return rc


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_text(path.read_text(), source=str(path))
