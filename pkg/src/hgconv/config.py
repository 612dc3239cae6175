"""Run configuration: INI files, environment overrides, command-line overrides.

Precedence, highest first: command-line ``--set``/flags, ``HGCONV_<SECTION>_<KEY>``
environment variables, the config file, built-in defaults. Defaults follow
the Kaggle malware hyperparameters (LN, prenorm, batch 64, vocab 257,
T 4096, K 32, H 256, dropout 0.1, one layer, lr 0.01, 10 epochs).

Sections and keys::

    [model]     vocab_size max_seq_len feature_dim kernel_dim num_layers num_classes
                dropout norm_kind norm_placement label_smoothing input_mode dtype eps_inv
    [schedule]  peak_lr warmup_fraction warmup_steps floor_lr
    [train]     epochs batch_size workers weight_decay clip_norm beta1 beta2 adam_eps
                target_accuracy
    [data]      task train_manifest eval_manifest train_samples eval_samples data_seed
    [run]       seed out_dir resume
    [bench]     seq_lens reps batch_size batch_divisor threads mixer
"""

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig

ENV_PREFIX = "HGCONV_"


@dataclass
class ScheduleSettings:
    peak_lr: float = 0.01
    warmup_fraction: float = 0.1
    warmup_steps: int = -1
    floor_lr: float = 0.0


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 64
    workers: int = 1
    weight_decay: float = 0.0
    clip_norm: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    target_accuracy: float = 0.0


@dataclass
class DataSettings:
    task: str = "manifest"
    train_manifest: str = ""
    eval_manifest: str = ""
    train_samples: int = 2000
    eval_samples: int = 500
    data_seed: int = 1


@dataclass
class RunSettings:
    seed: int = 0
    out_dir: str = "runs/default"
    resume: str = ""


@dataclass
class BenchSettings:
    seq_lens: str = "256,512,1024,2048,4096,8192,16384,32768"
    reps: int = 3
    batch_size: int = 0
    batch_divisor: int = 1
    threads: int = 1
    mixer: str = "hgconv"

    def seq_len_list(self):
        return [int(s) for s in self.seq_lens.replace(" ", "").split(",") if s]


SECTIONS = {
    "model": ModelConfig,
    "schedule": ScheduleSettings,
    "train": TrainSettings,
    "data": DataSettings,
    "run": RunSettings,
    "bench": BenchSettings,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    run: RunSettings = field(default_factory=RunSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def total_steps(self, train_size):
        per_epoch = -(-train_size // self.train.batch_size)
        return max(per_epoch * self.train.epochs, 1)

    def warmup_steps(self, total):
        if self.schedule.warmup_steps >= 0:
            return self.schedule.warmup_steps
        return int(self.schedule.warmup_fraction * total)


def _coerce(section, key, raw, ftype):
    where = f"{section}.{key}"
    try:
        if ftype is bool:
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        if ftype is int:
            return int(str(raw).strip())
        if ftype is float:
            return float(str(raw).strip())
        return str(raw).strip()
    except ValueError:
        raise ConfigError({where: f"cannot parse {raw!r} as {ftype.__name__}"}) from None


def _field_types(cls):
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, type) else hints.get(str(f.type), str)
        out[f.name] = t
    return out


def load_config(path=None, overrides=(), environ=None):
    """Build a validated :class:`RunConfig`.

    ``overrides`` is an iterable of ``"section.key=value"`` strings.
    """
    values = {name: {} for name in SECTIONS}
    problems = {}

    if path:
        if not os.path.exists(path):
            raise ConfigError({"--config": f"file not found: {path}"})
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.read(path)
        for section in parser.sections():
            if section not in SECTIONS:
                problems[section] = "unknown section"
                continue
            for key, raw in parser.items(section):
                values[section][key] = raw

    environ = os.environ if environ is None else environ
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in SECTIONS and key:
            values[section][key] = raw

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems[item] = "override must look like section.key=value"
            continue
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if section not in SECTIONS:
            problems[lhs] = "unknown section"
            continue
        values[section][key] = raw

    built = {}
    for section, cls in SECTIONS.items():
        types = _field_types(cls)
        kwargs = {}
        for key, raw in values[section].items():
            if key not in types:
                problems[f"{section}.{key}"] = "unknown key"
                continue
            try:
                kwargs[key] = _coerce(section, key, raw, types[key])
            except ConfigError as exc:
                problems.update(exc.problems)
        try:
            built[section] = cls(**kwargs)
        except ConfigError as exc:
            problems.update({f"{section}.{k}": v for k, v in exc.problems.items()})
        except TypeError as exc:
            problems[section] = str(exc)
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**built)
    validate(cfg)
    return cfg


def validate(cfg, need_data=True):
    problems = {}
    t, d = cfg.train, cfg.data
    if t.epochs < 1:
        problems["train.epochs"] = "must be >= 1"
    if t.batch_size < 1:
        problems["train.batch_size"] = "must be >= 1"
    if t.workers < 1:
        problems["train.workers"] = "must be >= 1"
    if not 0 <= cfg.run.seed < 2 ** 64:
        problems["run.seed"] = "must be a 64-bit unsigned integer"
    if d.task not in ("manifest", "marker-pair", "majority-byte"):
        problems["data.task"] = f"unknown task {d.task!r}"
    elif need_data and d.task == "manifest":
        for key in ("train_manifest", "eval_manifest"):
            p = getattr(d, key)
            if key == "eval_manifest" and not p:
                continue
            if not p:
                problems[f"data.{key}"] = "required when data.task = manifest"
            elif not os.path.exists(p):
                problems[f"data.{key}"] = f"file not found: {p}"
    elif d.task != "manifest" and cfg.model.num_classes != 2:
        problems["model.num_classes"] = "synthetic tasks are binary; set num_classes = 2"
    if cfg.run.resume and not os.path.exists(cfg.run.resume):
        problems["run.resume"] = f"file not found: {cfg.run.resume}"
    if cfg.bench.mixer not in ("hgconv", "naive"):
        problems["bench.mixer"] = "must be 'hgconv' or 'naive'"
    try:
        lens = cfg.bench.seq_len_list()
        if lens != sorted(set(lens)) or not lens:
            problems["bench.seq_lens"] = "must be a strictly increasing comma-separated list"
    except ValueError:
        problems["bench.seq_lens"] = "must be comma-separated integers"
    if problems:
        raise ConfigError(problems)
    return cfg


def dump_ini(cfg, path):
    parser = configparser.ConfigParser()
    for section, data in cfg.to_dict().items():
        parser[section] = {k: str(v) for k, v in data.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def from_dict(d) -> Optional[RunConfig]:
    built = {}
    for section, cls in SECTIONS.items():
        known = {f.name for f in dataclasses.fields(cls)}
        built[section] = cls(**{k: v for k, v in d.get(section, {}).items() if k in known})
    return RunConfig(**built)
