"""Run configuration: a sectioned INI file mapped onto the library's config dataclasses.

Every key is checked against the dataclass it belongs to; unknown sections or keys
and unparsable values are collected and reported together.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .cpl import CplConfig, TrainConfig
from .data import AugmentConfig, CorpusConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig, ModalityDropoutConfig

SEED_ENV = "AVCPL_SEED"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass
class LmConfig:
    order: int = 4
    discount: float = 0.75
    n_sentences: int = 20000


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    corpus_dir: str = ""          # empty: <output_dir>/corpus
    labeled: str = "labeled_small"
    unlabeled: str = "unlabeled_in"
    valid: str = "valid"
    test: str = "test"
    eval_every: int = 250
    pretrain: str = "none"


@dataclass
class StageSection:
    mode: str = "cpl"
    labeled: str = "labeled_small"
    unlabeled: str = ""
    algorithm: str = ""
    steps: int = -1
    name: str = ""


# section name -> dataclass
SECTIONS = {
    "run": RunSection,
    "corpus": CorpusConfig,
    "encoder": EncoderConfig,
    "dropout": ModalityDropoutConfig,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "cpl": CplConfig,
    "decoder": DecoderConfig,
    "lm": LmConfig,
}
# fields that are filled from other sections or not expressible as scalars
_SKIP = {("train", "augment"), ("corpus", "vocab"), ("corpus", "visemes"), ("corpus", "sizes")}
_SIZE_PREFIX = "size_"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dropout: ModalityDropoutConfig = field(default_factory=lambda: ModalityDropoutConfig(0.5, 0.5))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cpl: CplConfig = field(default_factory=CplConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    stages: list = field(default_factory=list)
    source_text: str = ""

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    @property
    def corpus_dir(self) -> Path:
        return Path(self.run.corpus_dir) if self.run.corpus_dir else self.output_dir / "corpus"

    @property
    def seed(self) -> int:
        return self.run.seed


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return raw


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
        else:
            out[f.name] = None
    return out


def _build(section: str, cls, items: dict, problems: list, base: dict | None = None):
    defaults = _defaults(cls)
    if base:
        defaults.update(base)
    kwargs = dict(defaults) if base else {}
    for key, raw in items.items():
        if key not in defaults or (section, key) in _SKIP:
            problems.append(f"[{section}] unknown key {key!r}")
            continue
        try:
            kwargs[key] = _parse_value(raw, defaults[key])
        except ValueError as exc:
            problems.append(f"[{section}] {key}: {exc}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        problems.append(f"[{section}] {exc}")
        return None


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    problems: list[str] = []
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None

    cfg = RunConfig(source_text=text)
    built = {}
    stage_names = []
    for sec in cp.sections():
        if sec.startswith("stage."):
            stage_names.append(sec)
            continue
        if sec not in SECTIONS:
            problems.append(f"unknown section [{sec}]")
    for sec, cls in SECTIONS.items():
        items = dict(cp[sec]) if cp.has_section(sec) else {}
        base = None
        if sec == "dropout":
            base = {"p_m": 0.5, "p_a": 0.5}
        if sec == "corpus":
            sizes = dict(CorpusConfig().sizes)
            for key in [k for k in items if k.startswith(_SIZE_PREFIX)]:
                split = key[len(_SIZE_PREFIX):]
                raw = items.pop(key)
                if split not in sizes:
                    problems.append(f"[corpus] unknown split in {key!r}")
                    continue
                try:
                    sizes[split] = int(raw)
                    if sizes[split] < 0:
                        problems.append(f"[corpus] {key} must be >= 0")
                except ValueError:
                    problems.append(f"[corpus] {key}: expected an integer, got {raw!r}")
            base = {"sizes": sizes}
        obj = _build(sec, cls, items, problems, base)
        if obj is not None:
            built[sec] = obj
    for sec, obj in built.items():
        setattr(cfg, sec, obj)
    cfg.train.augment = cfg.augment

    if SEED_ENV in env:
        try:
            cfg.run.seed = int(env[SEED_ENV])
        except ValueError:
            problems.append(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer")
    cfg.corpus.seed = cfg.run.seed
    cfg.train.seed = cfg.run.seed
    if cfg.run.pretrain not in ("none", "audio", "video"):
        problems.append(f"[run] pretrain must be none, audio or video, got {cfg.run.pretrain!r}")
    if cfg.run.eval_every < 0:
        problems.append("[run] eval_every must be >= 0")
    if cfg.encoder.audio_dim != cfg.corpus.audio_dim or cfg.encoder.video_dim != cfg.corpus.video_dim:
        problems.append("[encoder] audio_dim/video_dim must match [corpus]")
    if cfg.augment.pose_dims != cfg.corpus.pose_dims:
        problems.append("[augment] pose_dims must match [corpus] pose_dims")

    splits = set(CorpusConfig().sizes)
    for key in ("labeled", "unlabeled", "valid", "test"):
        if getattr(cfg.run, key) not in splits:
            problems.append(f"[run] {key}: unknown split {getattr(cfg.run, key)!r}")
    for sec in sorted(stage_names, key=_stage_order(problems)):
        st = _build(sec, StageSection, dict(cp[sec]), problems)
        if st is None:
            continue
        if st.mode not in ("seed", "cpl", "finetune"):
            problems.append(f"[{sec}] mode must be seed, cpl or finetune")
        for key in ("labeled", "unlabeled"):
            v = getattr(st, key)
            for part in filter(None, v.split("+")):
                if part not in splits:
                    problems.append(f"[{sec}] {key}: unknown split {part!r}")
        if st.mode == "cpl" and not st.unlabeled:
            problems.append(f"[{sec}] cpl stage needs unlabeled splits")
        if st.algorithm and st.algorithm not in ("ema", "slimipl"):
            problems.append(f"[{sec}] algorithm must be ema or slimipl")
        st.name = st.name or sec
        cfg.stages.append(st)
    if problems:
        raise ConfigError(problems)
    return cfg


def _stage_order(problems):
    def key(sec):
        tail = sec.split(".", 1)[1]
        if not tail.isdigit():
            problems.append(f"[{sec}] stage sections must be named stage.<integer>")
            return 10 ** 9
        return int(tail)
    return key


def load_config(path, env: dict | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"config file not found: {p}"])
    return parse_config(p.read_text(encoding="utf-8"), env)
