"""Run configuration: dataclasses plus an INI-style key/value file format.

Full-scale reference values (batch 640, 40K pre-training steps) are far beyond
desk scale; the defaults below are sized so a full pipeline runs in minutes on
one CPU core.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .corpus import REFERENCE_COUNTS, CorpusSpec
from .errors import ConfigError
from .labels import EmotionClass


class Setting(str, Enum):
    DIRECT = "direct"
    BERT_DIRECT = "bert+direct"
    PRETRAIN_FINETUNE = "pretrain+finetune"
    PRETRAIN_PROMPT = "pretrain+prompt"

    @classmethod
    def parse(cls, s: str) -> "Setting":
        key = s.strip().lower().replace("_", "+").replace("-", "+")
        aliases = {"bertdirect": "bert+direct", "pretrainfinetune": "pretrain+finetune",
                   "pretrainprompt": "pretrain+prompt", "finetune": "pretrain+finetune",
                   "prompt": "pretrain+prompt"}
        key = aliases.get(key, key)
        for m in cls:
            if m.value == key:
                return m
        raise ConfigError(f"unknown experiment setting {s!r}")


TASKS = ("wwmlm", "span_mvfr", "span_mvfc_kl", "span_mafr")


@dataclass
class ModelConfig:
    vocab_size: int = 173
    hidden: int = 48
    heads: int = 4
    layers: int = 4
    ffn: int = 96
    dv: int = 32
    da: int = 32
    k: int = 8
    max_len: int = 128
    n_classes: int = 4
    ln_eps: float = 1e-12
    init_std: float = 0.02
    # The token table doubles as the MLM output projection; at small widths a
    # larger scale lets masked-word logits become confident within a few hundred steps.
    token_init_std: float = 0.1

    def check(self) -> None:
        for name in ("vocab_size", "hidden", "heads", "layers", "ffn", "dv", "da", "k", "max_len",
                     "init_std", "token_init_std"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.hidden % self.heads:
            raise ConfigError("model.hidden must be divisible by model.heads")


@dataclass
class MaskingConfig:
    text_rate: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1
    frame_rate: float = 0.15
    span_len: int = 3
    span_whole_word: bool = True

    def check(self) -> None:
        if not 0 <= self.text_rate <= 1 or not 0 <= self.frame_rate <= 1:
            raise ConfigError("masking rates must lie in [0, 1]")
        if self.span_len < 1:
            raise ConfigError("masking.span_len must be >= 1")
        total = self.mask_prob + self.random_prob + self.keep_prob
        if abs(total - 1.0) > 1e-9 or min(self.mask_prob, self.random_prob, self.keep_prob) < 0:
            raise ConfigError("masking action probabilities must be non-negative and sum to 1")


@dataclass
class PretrainConfig:
    # Desk-scale defaults. The full-scale reference recipe is batch 640 for 40K
    # steps at lr 5e-5; at 2K steps that rate leaves every task loss near its start.
    steps: int = 2000
    batch_size: int = 16
    lr: float = 5e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tasks: tuple[str, ...] = TASKS
    log_every: int = 50

    def check(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("pretrain.steps and pretrain.batch_size must be >= 1")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad or not self.tasks:
            raise ConfigError(f"pretrain.tasks must be a non-empty subset of {TASKS}, got {bad}")


@dataclass
class DownstreamConfig:
    # Full-scale reference rates are 5e-5 (all data) and 3e-5 (fractions); the
    # small model here needs ten times that to converge in 15 epochs.
    epochs: int = 15
    batch_size: int = 32
    lr_full: float = 5e-4
    lr_fraction: float = 3e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    fraction: float = 1.0
    folds: int = 4
    seeds: tuple[int, ...] = (0, 1, 2)
    pooling: str = "cls"
    freeze_backbone: bool = False

    def check(self) -> None:
        if not 0 < self.fraction <= 1:
            raise ConfigError("downstream.fraction must lie in (0, 1]")
        if self.folds < 2:
            raise ConfigError("downstream.folds must be >= 2")
        if self.pooling not in ("cls", "mean"):
            raise ConfigError("downstream.pooling must be 'cls' or 'mean'")

    def lr_for(self, fraction: float) -> float:
        return self.lr_full if fraction >= 1.0 else self.lr_fraction


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    setting: Setting = Setting.PRETRAIN_PROMPT
    seed: int = 0
    unlabeled_data: str = ""
    labeled_data: str = ""
    checkpoint: str = ""
    bert_weights: str = ""
    output_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.setting, str) and not isinstance(self.setting, Setting):
            self.setting = Setting.parse(self.setting)

    def check(self) -> None:
        self.model.check()
        self.masking.check()
        self.pretrain.check()
        self.downstream.check()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["setting"] = self.setting.value
        return d

    def digest(self, section: str | None = None) -> str:
        d = self.to_dict() if section is None else self.to_dict()[section]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"model": ModelConfig, "masking": MaskingConfig, "pretrain": PretrainConfig,
             "downstream": DownstreamConfig}


def _coerce(raw: str, tp, where: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp in (int, float, str):
            return tp(raw.strip())
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(inner(x) for x in items)
        if tp is Setting:
            return Setting.parse(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _fill(cls, items: dict, where: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[key] = _coerce(raw, hints[key], f"{where}.{key}")
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {}
    for name in cp.sections():
        if name not in _SECTIONS and name != "run":
            raise ConfigError(f"unknown config section [{name}]")
    for name, cls in _SECTIONS.items():
        sections[name] = _fill(cls, dict(cp[name]) if cp.has_section(name) else {}, name)
    top = dict(cp["run"]) if cp.has_section("run") else {}
    base = _fill(RunConfig, top, "run")
    cfg = dataclasses.replace(base, **sections)
    cfg.check()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text("utf-8"))


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, Enum):
        return v.value
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    for f in dataclasses.fields(RunConfig):
        if f.name in _SECTIONS:
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for name in _SECTIONS:
        lines += ["", f"[{name}]"]
        sub = getattr(cfg, name)
        for f in dataclasses.fields(sub):
            lines.append(f"{f.name} = {_fmt(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def parse_corpus_spec(text: str) -> CorpusSpec:
    """Corpus spec from a ``[corpus]`` section.

    Either ``counts = happy:64, anger:64, ...`` or ``total = N`` (optionally with
    ``reference = iemocap|msp_improv``) sets the class sizes; every other key
    maps onto a :class:`CorpusSpec` field.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed corpus spec: {exc}") from exc
    if not cp.has_section("corpus"):
        raise ConfigError("corpus spec needs a [corpus] section")
    items = dict(cp["corpus"])
    total = items.pop("total", None)
    reference = items.pop("reference", "iemocap").strip().lower()
    counts = items.pop("counts", None)
    if reference not in REFERENCE_COUNTS:
        raise ConfigError(f"corpus.reference must be one of {sorted(REFERENCE_COUNTS)}")
    hints = typing.get_type_hints(CorpusSpec)
    known = {f.name for f in dataclasses.fields(CorpusSpec)} - {"counts"}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"corpus: unknown key {key!r}")
        kwargs[key] = _coerce(raw, hints[key], f"corpus.{key}")
    try:
        if counts is not None:
            parsed = {}
            for part in counts.split(","):
                name, _, n = part.partition(":")
                parsed[EmotionClass.parse(name.strip())] = int(n)
            return CorpusSpec(counts=parsed, **kwargs)
        if total is None:
            raise ConfigError("corpus spec needs either counts or total")
        return CorpusSpec.from_proportions(int(total), REFERENCE_COUNTS[reference], **kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"corpus: {exc}") from exc


def load_corpus_spec(path: str | Path) -> CorpusSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus spec {path} does not exist")
    return parse_corpus_spec(path.read_text("utf-8"))
