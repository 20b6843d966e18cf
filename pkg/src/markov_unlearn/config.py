"""Experiment configuration: typed dataclass sections read from INI-style files.

A config file is a set of ``[section]`` blocks of ``key = value`` lines. Lists
are comma separated, mappings are ``name=value`` pairs separated by commas.
Every file carries ``[run] format_version``. Unknown sections or keys are
rejected, and all problems are reported together.
"""
from __future__ import annotations

import configparser
import copy
import dataclasses
import hashlib
import io
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .chains import DataConfig
from .model import ModelConfig
from .objectives import UnlearnConfig

FORMAT_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RunConfig:
    format_version: int = FORMAT_VERSION
    seed: int = 0
    name: str = "run"
    out_dir: str = "runs/default"
    cache_dir: str = "runs/cache"


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 5e-4
    weight_decay: float = 0.01
    schedule: str = "constant"
    warmup_steps: int = 0


@dataclass
class EvalConfig:
    kl_direction: str = "true_model"
    include_initial: bool = True
    pooling: str = "positions"
    batch_size: int = 256


@dataclass
class RelearnConfig:
    fraction: float = 0.2
    mode: str = "shortest"
    epochs: int = 3
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.01
    eval_every_steps: int = 5


@dataclass
class SweepConfig:
    methods: list[str] = field(default_factory=lambda: ["SimNPO"])
    betas: list[float] = field(default_factory=list)
    beta_by_method: dict[str, float] = field(default_factory=dict)
    gammas: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    retain_cap: float = 0.1


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    relearn: RelearnConfig = field(default_factory=RelearnConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def replace(self, **sections) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for section, values in sections.items():
            setattr(new, section, dataclasses.replace(getattr(new, section), **values))
        return new

    def validate(self) -> list[str]:
        errs = []
        if self.run.format_version != FORMAT_VERSION:
            errs.append(f"run.format_version: expected {FORMAT_VERSION}, got {self.run.format_version}")
        d = self.data
        if not 0 <= d.epsilon < 1:
            errs.append(f"data.epsilon: must be in [0, 1), got {d.epsilon}")
        for k in ("n_retain", "n_forget1", "n_forget2", "len_retain", "len_forget1", "len_forget2"):
            if getattr(d, k) < 1:
                errs.append(f"data.{k}: must be >= 1")
        if not 0 < d.train_fraction < 1:
            errs.append(f"data.train_fraction: must be in (0, 1), got {d.train_fraction}")
        if d.retrain_on not in ("retain", "forget"):
            errs.append(f"data.retrain_on: must be 'retain' or 'forget', got {d.retrain_on!r}")
        longest = max(d.len_retain, d.len_forget1, d.len_forget2)
        if self.model.max_len < longest + 1:
            errs.append(f"model.max_len: {self.model.max_len} < longest sequence + 1 = {longest + 1}")
        for sec in ("pretrain", "relearn"):
            tc = getattr(self, sec)
            if tc.epochs < 1 or tc.batch_size < 1:
                errs.append(f"{sec}: epochs and batch_size must be >= 1")
            if tc.lr <= 0:
                errs.append(f"{sec}.lr: must be > 0")
        if self.pretrain.schedule not in ("constant", "linear"):
            errs.append(f"pretrain.schedule: must be 'constant' or 'linear', got {self.pretrain.schedule!r}")
        errs += self.unlearn.validate()
        if self.unlearn.lr <= 0:
            errs.append("unlearn.lr: must be > 0")
        if self.eval.kl_direction not in ("true_model", "model_true"):
            errs.append(f"eval.kl_direction: must be true_model or model_true, got {self.eval.kl_direction!r}")
        if self.eval.pooling not in ("positions", "sequences"):
            errs.append(f"eval.pooling: must be positions or sequences, got {self.eval.pooling!r}")
        if not 0 < self.relearn.fraction <= 1:
            errs.append(f"relearn.fraction: must be in (0, 1], got {self.relearn.fraction}")
        if self.relearn.mode not in ("shortest", "random"):
            errs.append(f"relearn.mode: must be shortest or random, got {self.relearn.mode!r}")
        if self.relearn.eval_every_steps < 0:
            errs.append("relearn.eval_every_steps: must be >= 0")
        for m in self.sweep.methods:
            if m not in ("GA", "GradDiff", "WGradDiff", "NPO", "SimNPO"):
                errs.append(f"sweep.methods: unknown method {m!r}")
        return errs

    def kl_kwargs(self) -> dict:
        return {"direction": self.eval.kl_direction, "include_initial": self.eval.include_initial,
                "pooling": self.eval.pooling, "batch_size": self.eval.batch_size}


# config keys whose file name differs from the attribute name
ALIASES = {("unlearn", "lambda"): "lam"}
_REVERSE_ALIASES = {(s, a): k for (s, k), a in ALIASES.items()}

HELP: dict[str, tuple[str, str]] = {
    "run.format_version": ("config format version, must be 1", "-"),
    "run.seed": ("master seed; every random stream is derived from it", "integer"),
    "run.name": ("run id written to results.csv", "-"),
    "run.out_dir": ("output directory for this run", "path"),
    "run.cache_dir": ("shared cache of pretrained/retrained checkpoints", "path"),
    "data.epsilon": ("leakage probability of every chain", "probability"),
    "data.n_retain": ("Retain samples generated", "sequences"),
    "data.n_forget1": ("Forget1 samples generated", "sequences"),
    "data.n_forget2": ("Forget2 samples generated", "sequences"),
    "data.len_retain": ("Retain sequence length", "states"),
    "data.len_forget1": ("Forget1 sequence length", "states"),
    "data.len_forget2": ("Forget2 sequence length", "states"),
    "data.train_fraction": ("per-source train share, rest is test", "fraction"),
    "data.include_forget2_in_pretrain": ("pretrain the original model on Forget2 too", "bool"),
    "data.retrain_on": ("data of the retrained model: retain | forget", "-"),
    "model.layers": ("transformer blocks", "count"),
    "model.heads": ("attention heads", "count"),
    "model.d_model": ("embedding width", "features"),
    "model.n_states": ("state-space size", "states"),
    "model.max_len": ("positional table size", "positions"),
    "model.init_std": ("std of normal weight init", "-"),
    "model.dtype": ("float32 | float64", "-"),
    "pretrain.epochs": ("passes over the pretraining set", "epochs"),
    "pretrain.batch_size": ("sequences per step", "sequences"),
    "pretrain.lr": ("AdamW learning rate", "1/step"),
    "pretrain.weight_decay": ("decoupled weight decay", "-"),
    "pretrain.schedule": ("constant | linear (warm-up then decay)", "-"),
    "pretrain.warmup_steps": ("linear warm-up length", "steps"),
    "unlearn.method": ("GA | GradDiff | WGradDiff | NPO | SimNPO", "-"),
    "unlearn.beta": ("inverse temperature of NPO/SimNPO", "-"),
    "unlearn.gamma": ("SimNPO reward margin", "-"),
    "unlearn.lambda": ("weight of the retain loss", "-"),
    "unlearn.iterations": ("unlearning steps", "steps"),
    "unlearn.batch_size": ("forget (and retain) sequences per step", "sequences"),
    "unlearn.lr": ("AdamW learning rate", "1/step"),
    "unlearn.weight_decay": ("decoupled weight decay", "-"),
    "unlearn.eval_every": ("evaluation cadence", "steps"),
    "unlearn.diag_samples": ("forget-train samples used for weight diagnostics", "sequences"),
    "eval.kl_direction": ("true_model = KL(true||model), model_true = reverse", "-"),
    "eval.include_initial": ("count position 0 (initial distribution)", "bool"),
    "eval.pooling": ("positions = pool all positions, sequences = mean of per-sequence means", "-"),
    "eval.batch_size": ("evaluation batch size", "sequences"),
    "relearn.fraction": ("share of the forget train set used for relearning", "fraction"),
    "relearn.mode": ("shortest | random subset selection", "-"),
    "relearn.epochs": ("fine-tuning passes over the subset", "epochs"),
    "relearn.batch_size": ("sequences per step", "sequences"),
    "relearn.lr": ("AdamW learning rate", "1/step"),
    "relearn.weight_decay": ("decoupled weight decay", "-"),
    "relearn.eval_every_steps": ("evaluation cadence, 0 = once per epoch", "steps"),
    "sweep.methods": ("methods in the grid", "list"),
    "sweep.betas": ("beta grid (empty = unlearn.beta)", "list"),
    "sweep.beta_by_method": ("per-method beta, overrides betas, e.g. NPO=0.2, SimNPO=4", "mapping"),
    "sweep.gammas": ("gamma grid (empty = unlearn.gamma)", "list"),
    "sweep.lambdas": ("lambda grid (empty = unlearn.lambda)", "list"),
    "sweep.seeds": ("seed grid (empty = run.seed)", "list"),
    "sweep.retain_cap": ("max final retain KL for a cell to be eligible as best", "nats"),
}


def _sections():
    return [(f.name, f.type) for f in dataclasses.fields(ExperimentConfig)]


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _parse_value(raw: str, tp) -> object:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is list:
        (inner,) = typing.get_args(tp)
        return [_parse_value(x, inner) for x in raw.split(",") if x.strip()]
    if origin is dict:
        _, inner = typing.get_args(tp)
        out = {}
        for item in raw.split(","):
            if not item.strip():
                continue
            k, sep, v = item.partition("=")
            if not sep:
                raise ValueError(f"expected name=value, got {item.strip()!r}")
            out[k.strip()] = _parse_value(v, inner)
        return out
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, dict):
        return ", ".join(f"{k}={_format_value(x)}" for k, x in v.items())
    return str(v)


def from_mapping(raw: dict[str, dict[str, str]], base: ExperimentConfig | None = None,
                 errors: list[str] | None = None) -> ExperimentConfig:
    """Build a config from ``{section: {key: text}}``, collecting every error.

    Values that fail to parse keep their defaults, so range checks still run
    on everything else and one report lists all problems.
    """
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    errors = list(errors or [])
    sections = dict(_sections())
    for section, items in raw.items():
        if section not in sections:
            errors.append(f"{section}: unknown section")
            continue
        cls = type(getattr(cfg, section))
        types = _field_types(cls)
        values = {}
        for key, text in items.items():
            attr = ALIASES.get((section, key), key)
            if attr not in types or (section, attr) in _REVERSE_ALIASES and key == attr:
                errors.append(f"{section}.{key}: unknown key")
                continue
            try:
                values[attr] = _parse_value(text, types[attr])
            except ValueError as e:
                errors.append(f"{section}.{key}: {e}")
        if values:
            try:
                setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
            except ValueError as e:
                errors.append(f"{section}: {e}")
    errors += cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_text(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError([f"syntax: {e}"]) from None
    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    errors = []
    for ov in overrides or []:
        key, sep, value = ov.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            errors.append(f"--set {ov!r}: expected section.key=value")
            continue
        raw.setdefault(section, {})[name] = value
    return from_mapping(raw, errors=errors)


def load(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    return parse_text(Path(path).read_text(), overrides)


def to_text(cfg: ExperimentConfig) -> str:
    """Canonical serialised form; feeding it back reproduces ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, _ in _sections():
        obj = getattr(cfg, section)
        cp.add_section(section)
        for f in dataclasses.fields(obj):
            key = _REVERSE_ALIASES.get((section, f.name), f.name)
            cp.set(section, key, _format_value(getattr(obj, f.name)))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def section_digest(cfg: ExperimentConfig, *sections: str, extra: str = "") -> str:
    payload = {s: dataclasses.asdict(getattr(cfg, s)) for s in sections}
    blob = json.dumps(payload, sort_keys=True) + extra
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def describe_keys() -> str:
    lines = []
    for key, (text, unit) in HELP.items():
        lines.append(f"  {key:<34} [{unit}] {text}")
    return "\n".join(lines)


def annotated_text(cfg: ExperimentConfig | None = None) -> str:
    """``to_text`` with a comment above every key giving its meaning and unit."""
    cfg = cfg or ExperimentConfig()
    out = []
    for line in to_text(cfg).splitlines():
        if line.startswith("["):
            section = line[1:-1]
        elif " = " in line:
            key = line.split(" = ", 1)[0]
            text, unit = HELP[f"{section}.{key}"]
            out.append(f"# {text}" + (f" [{unit}]" if unit != "-" else ""))
        out.append(line)
    return "\n".join(out) + "\n"
