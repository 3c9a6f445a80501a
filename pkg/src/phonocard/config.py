"""
Run configuration: an optional INI file overlaid by command-line flags.

Recognised sections and keys::

    [paths]       data_root, work_dir, checkpoint
    [run]         seed, fold, n_folds, train_fraction, aggregation
    [train]       epochs, batch_size, learning_rate, variant, checkpoint_every
    [preprocess]  spike_window, spike_factor, min_cycle, max_cycle
    [filter]      low_cut, high_cut, order
    [mfcc]        frame_len, hop, fft_len, n_mels, n_coeffs, f_min, f_max, log_floor

Unknown sections or keys are rejected so that typos do not silently fall
back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .features import MfccConfig
from .preprocess import FilterSpec, PreprocessConfig
from .training import TrainConfig

WORKDIR_ENV = "PHONOCARD_WORKDIR"
AGGREGATION_RULES = ("majority", "mean")


@dataclass
class RunConfig:
    command: str = ""
    data_root: Path | None = None
    work_dir: Path | None = None
    checkpoint: Path | None = None
    checkpoints: list = field(default_factory=list)
    seed: int = 0
    fold: int = 1
    n_folds: int = 4
    train_fraction: float = 0.9
    aggregation: str = "majority"
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)

    def to_dict(self) -> dict:
        d = {"command": self.command, "seed": self.seed, "fold": self.fold,
             "n_folds": self.n_folds, "train_fraction": self.train_fraction,
             "aggregation": self.aggregation}
        for k in ("data_root", "work_dir", "checkpoint"):
            v = getattr(self, k)
            d[k] = None if v is None else str(v)
        d["checkpoints"] = [str(p) for p in self.checkpoints]
        d["train"] = self.train.to_dict()
        d["preprocess"] = self.preprocess.to_dict()
        d["mfcc"] = self.mfcc.to_dict()
        return d


def _coerce(cls, section: str, items: dict) -> dict:
    """Convert INI strings to the field types of dataclass ``cls``."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in items.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        default = fields[key].default
        try:
            if isinstance(default, bool):
                out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                out[key] = int(raw)
            elif isinstance(default, float):
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return out


_RUN_KEYS = {"seed": int, "fold": int, "n_folds": int, "train_fraction": float,
             "aggregation": str}
_PATH_KEYS = ("data_root", "work_dir", "checkpoint")


def read_config_file(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = RunConfig()
    known = {"paths", "run", "train", "preprocess", "filter", "mfcc"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}] in {path}")
    if parser.has_section("paths"):
        for key, raw in parser.items("paths"):
            if key not in _PATH_KEYS:
                raise ConfigError(f"unknown key {key!r} in [paths]")
            setattr(cfg, key, Path(raw))
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown key {key!r} in [run]")
            try:
                setattr(cfg, key, _RUN_KEYS[key](raw))
            except ValueError as exc:
                raise ConfigError(f"[run] {key} = {raw!r}: {exc}") from exc
    if parser.has_section("train"):
        cfg.train = TrainConfig(**_coerce(TrainConfig, "train", dict(parser.items("train"))))
    filt = FilterSpec()
    if parser.has_section("filter"):
        filt = FilterSpec(**_coerce(FilterSpec, "filter", dict(parser.items("filter"))))
    pre = {}
    if parser.has_section("preprocess"):
        pre = _coerce(PreprocessConfig, "preprocess", dict(parser.items("preprocess")))
    cfg.preprocess = PreprocessConfig(filter=filt, **pre)
    if parser.has_section("mfcc"):
        cfg.mfcc = MfccConfig(**_coerce(MfccConfig, "mfcc", dict(parser.items("mfcc"))))
    return cfg


def resolve(args) -> RunConfig:
    """Build the RunConfig for parsed CLI ``args``: defaults < config file < flags < checks.

    The work directory falls back to ``$PHONOCARD_WORKDIR`` when neither the
    file nor the flags name one.
    """
    cfg = read_config_file(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.command = args.command
    for key in _PATH_KEYS:
        v = getattr(args, key, None)
        if isinstance(v, list):
            cfg.checkpoints = [Path(p) for p in v]
            v = v[0] if v else None
        if v is not None:
            setattr(cfg, key, Path(v))
    if cfg.checkpoint is not None and not cfg.checkpoints:
        cfg.checkpoints = [cfg.checkpoint]
    if cfg.work_dir is None and os.environ.get(WORKDIR_ENV):
        cfg.work_dir = Path(os.environ[WORKDIR_ENV])
    for key in ("seed", "fold", "aggregation"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    overrides = {}
    for flag, name in (("epochs", "epochs"), ("batch_size", "batch_size"),
                       ("lr", "learning_rate"), ("variant", "variant"),
                       ("checkpoint_every", "checkpoint_every")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[name] = v
    # the run seed drives batch order as well as initialisation
    overrides["seed"] = cfg.seed
    cfg.train = dataclasses.replace(cfg.train, **overrides)
    if not 1 <= cfg.fold <= cfg.n_folds:
        raise ConfigError(f"--fold must lie in 1..{cfg.n_folds}, got {cfg.fold}")
    if cfg.aggregation not in AGGREGATION_RULES:
        raise ConfigError(f"aggregation must be one of {AGGREGATION_RULES}")
    return cfg
