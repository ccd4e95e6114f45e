"""Run configuration: an INI file with a fixed schema, plus ``section.key=value`` overrides.

Schema (every key optional; defaults printed by ``netpower defaults``):

  [paths]     library (liberty-lite file; empty = packaged fixture), out
  [corpus]    n_cycles, min_cells, equiv_rewrites (0 = automatic), jobs
  [gen]       defaults for every design: fanout, register_fraction, n_icg, leaf_cells
  [layout]    max_fanout, branching, wire_cap_per_fanout, restructure, seed
  [design:N]  one section per design N: n_cells, seed, workload_seed, plus any [gen] key
  [split]     train, test (comma-separated design names)
  [encoder]   embed_dim, mp_layers, beta, seed
  [pretrain]  epochs, batch_size, lr, tau, mask_ratio, cycles_per_scope, checkpoint_every, seed,
              eval_cycles_per_scope
  [finetune]  n_estimators, max_depth, shrinkage, embedding_mode
  [eval]      prefixes (comma-separated scope prefixes for the component table; empty = top-level scopes)
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from .encoder import EncoderConfig
from .finetune import EMBED_MODES, FinetuneConfig
from .forge.generate import GenParams
from .forge.transforms import LayoutParams
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending ``section.key``."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class Paths:
    library: str = ""
    out: str = "out"


@dataclass
class CorpusConfig:
    n_cycles: int = 300
    min_cells: int = 20
    equiv_rewrites: int = 0
    jobs: int = 1


@dataclass
class GenDefaults:
    fanout: int = 4
    register_fraction: float = 0.2
    n_icg: int = 4
    leaf_cells: int = 150


@dataclass
class DesignSpec:
    name: str
    n_cells: int = 500
    seed: int = 0
    workload_seed: int = 1000
    fanout: Optional[int] = None
    register_fraction: Optional[float] = None
    n_icg: Optional[int] = None
    leaf_cells: Optional[int] = None

    def gen_params(self, defaults: GenDefaults) -> GenParams:
        pick = lambda k: getattr(self, k) if getattr(self, k) is not None else getattr(defaults, k)
        return GenParams(n_cells=self.n_cells, fanout=pick("fanout"), register_fraction=pick("register_fraction"),
                         n_icg=pick("n_icg"), seed=self.seed, leaf_cells=pick("leaf_cells"))


@dataclass
class SplitConfig:
    train: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)


@dataclass
class PretrainSection(PretrainConfig):
    eval_cycles_per_scope: int = 20

    def core(self) -> PretrainConfig:
        keys = {f.name for f in dataclasses.fields(PretrainConfig)}
        return PretrainConfig(**{k: v for k, v in asdict(self).items() if k in keys})


@dataclass
class EvalConfig:
    prefixes: List[str] = field(default_factory=list)


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    gen: GenDefaults = field(default_factory=GenDefaults)
    layout: LayoutParams = field(default_factory=LayoutParams)
    designs: Dict[str, DesignSpec] = field(default_factory=dict)
    split: SplitConfig = field(default_factory=SplitConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def section(self, name: str) -> dict:
        """Plain-dict view of one section (used for stage stamps)."""
        if name == "designs":
            return {k: asdict(v) for k, v in sorted(self.designs.items())}
        return asdict(getattr(self, name))

    def digest(self, *sections: str) -> str:
        blob = json.dumps({s: self.section(s) for s in sections}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in ("paths", "corpus", "gen", "layout", "split", "encoder", "pretrain", "finetune", "eval"):
            cp[sec] = {k: _fmt(v) for k, v in asdict(getattr(self, sec)).items()
                       if not (sec == "encoder" and k == "in_dim")}
        for name, d in sorted(self.designs.items()):
            cp[f"design:{name}"] = {k: _fmt(v) for k, v in asdict(d).items() if k != "name" and v is not None}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    def validate(self) -> None:
        for sec, obj in (("gen", None), ("layout", self.layout), ("encoder", self.encoder)):
            if obj is not None:
                try:
                    obj.validate()
                except ValueError as exc:
                    raise ConfigError(sec, str(exc)) from None
        if self.corpus.n_cycles < 1:
            raise ConfigError("corpus.n_cycles", "must be positive")
        if self.corpus.jobs < 1:
            raise ConfigError("corpus.jobs", "must be at least 1")
        if self.finetune.embedding_mode not in EMBED_MODES:
            raise ConfigError("finetune.embedding_mode", f"must be one of {EMBED_MODES}")
        if self.pretrain.batch_size < 2:
            raise ConfigError("pretrain.batch_size", "must be at least 2")
        for name, d in self.designs.items():
            try:
                d.gen_params(self.gen).validate()
            except ValueError as exc:
                raise ConfigError(f"design:{name}", str(exc)) from None
        for key, names in (("split.train", self.split.train), ("split.test", self.split.test)):
            for n in names:
                if n not in self.designs:
                    raise ConfigError(key, f"unknown design '{n}'")
        both = set(self.split.train) & set(self.split.test)
        if both:
            raise ConfigError("split.test", f"designs in both splits: {sorted(both)}")


def _fmt(v) -> str:
    if isinstance(v, list):
        return ", ".join(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _field_types(cls) -> Dict[str, str]:
    return {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in dataclasses.fields(cls)}


def _convert(key: str, raw: str, type_name: str):
    t = type_name.replace("Optional[", "").rstrip("]")
    try:
        if t.startswith("List"):
            return [s.strip() for s in raw.split(",") if s.strip()]
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(key, f"cannot read '{raw}' as {t}") from None


_SECTIONS = {"paths": Paths, "corpus": CorpusConfig, "gen": GenDefaults, "layout": LayoutParams,
             "split": SplitConfig, "encoder": EncoderConfig, "pretrain": PretrainSection,
             "finetune": FinetuneConfig, "eval": EvalConfig}
_FIXED = {"encoder": {"in_dim"}}


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    full = f"{section}.{key}"
    if section.startswith("design:"):
        name = section.split(":", 1)[1].strip()
        if not name:
            raise ConfigError(section, "empty design name")
        d = cfg.designs.setdefault(name, DesignSpec(name))
        types = _field_types(DesignSpec)
        if key not in types or key == "name":
            raise ConfigError(full, "unknown key")
        setattr(d, key, _convert(full, raw, types[key]))
        return
    if section not in _SECTIONS:
        raise ConfigError(section, "unknown section")
    types = _field_types(_SECTIONS[section])
    if key not in types or key in _FIXED.get(section, ()):
        raise ConfigError(full, "unknown key")
    # some section types are frozen, so rebuild instead of assigning
    setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **{key: _convert(full, raw, types[key])}))


def parse_config(text: str, overrides: Sequence[str] = ()) -> RunConfig:
    """Build a validated RunConfig from INI text and ``section.key=value`` overrides (applied last)."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed file: {exc}") from None
    cfg = RunConfig()
    for sec in cp.sections():
        if sec.startswith("design:"):
            cfg.designs.setdefault(sec.split(":", 1)[1].strip(), DesignSpec(sec.split(":", 1)[1].strip()))
        for key, raw in cp[sec].items():
            _apply(cfg, sec, key, raw)
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(ov, "override must look like section.key=value")
        lhs, raw = ov.split("=", 1)
        section, key = lhs.rsplit(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw)
    cfg.validate()
    return cfg


def load_config(path: str, overrides: Sequence[str] = ()) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


__all__ = ["ConfigError", "RunConfig", "DesignSpec", "Paths", "CorpusConfig", "GenDefaults", "SplitConfig",
           "PretrainSection", "EvalConfig", "parse_config", "load_config"]
