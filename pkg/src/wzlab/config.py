"""Experiment configuration files.

Grammar (INI style, read with :mod:`configparser`)::

    file     := section*
    section  := "[" name "]" NEWLINE (key "=" value NEWLINE)*
    comment  := lines starting with "#" or ";"

Sections and keys (all optional unless marked):

``[source]``   ``kind`` (required: gaussian_x_from_y | gaussian_y_from_x |
               laplace_sign), ``noise_var`` (required for Gaussian kinds)
``[train]``    ``variant``, ``lambda``, ``K``, ``epochs``, ``pretrain_epochs``,
               ``batch_size``, ``n_samples``, ``lr``, ``lr_final``,
               ``final_epochs``, ``steps_per_epoch``, ``pretrain_pairs``,
               ``hidden`` (comma list), ``negative_slope``, ``seed``,
               ``t_hard``, ``clip_norm``
``[sweep]``    ``lambdas`` (comma list)
``[eval]``     ``samples``, ``n_samples`` (encoder samples at evaluation;
               defaults to the training value), ``seed``
``[output]``   ``dir``

Values are plain numbers or words; lists are comma separated. Unknown keys
are errors, so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .sources import KINDS, LAPLACE_SIGN, ConfigError, SourceSpec
from .trainer import TrainConfig, config_hash

_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_TRAIN_ALIASES = {"lambda": "lam"}
_INT_KEYS = {"K", "epochs", "pretrain_epochs", "batch_size", "n_samples", "final_epochs",
             "steps_per_epoch", "pretrain_pairs", "seed"}
_FLOAT_KEYS = {"lam", "lr", "lr_final", "negative_slope", "t_hard", "clip_norm"}


@dataclass
class ExperimentConfig:
    source: SourceSpec
    train: TrainConfig | None
    lambdas: list = field(default_factory=list)
    eval_samples: int = 1 << 20
    eval_n: int | None = None
    eval_seed: int = 12345
    out_dir: str = "runs"

    def experiment_dict(self) -> dict:
        """Everything that determines results (output directory excluded)."""
        return {"source": self.source.to_dict(),
                "train": self.train.to_dict() if self.train else None,
                "lambdas": [float(v) for v in self.lambdas],
                "eval": {"samples": self.eval_samples, "n_samples": self.eval_n,
                         "seed": self.eval_seed}}

    @property
    def hash(self) -> str:
        return config_hash(self.experiment_dict())

    def run_hash(self, train: TrainConfig) -> str:
        d = self.experiment_dict()
        d["train"] = train.to_dict()
        d["lambdas"] = []
        return config_hash(d)

    def sweep_lambdas(self) -> list[float]:
        if self.lambdas:
            return list(self.lambdas)
        if self.train is not None:
            return [self.train.lam]
        raise ConfigError("lambda: no [train] lambda or [sweep] lambdas given")

    def require_train(self) -> TrainConfig:
        if self.train is None:
            raise ConfigError("lambda: missing from [train]")
        return self.train


def _number(section, key, raw, kind):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: [{section}] value {raw!r} is not a valid {kind.__name__}") from None


def _floats(section, key, raw) -> list[float]:
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if not items:
        raise ConfigError(f"{key}: [{section}] list is empty")
    return [_number(section, key, s, float) for s in items]


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case ("K")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    unknown = set(cp.sections()) - {"source", "train", "sweep", "eval", "output"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")

    if not cp.has_section("source") or "kind" not in cp["source"]:
        raise ConfigError("kind: [source] kind is required")
    src = cp["source"]
    for key in src:
        if key not in ("kind", "noise_var"):
            raise ConfigError(f"{key}: unknown key in [source]")
    kind = src["kind"].strip()
    if kind not in KINDS:
        raise ConfigError(f"kind: expected one of {KINDS}, got {kind!r}")
    if kind != LAPLACE_SIGN and "noise_var" not in src:
        raise ConfigError("noise_var: required for Gaussian sources")
    noise_var = _number("source", "noise_var", src.get("noise_var", "0"), float)
    if kind != LAPLACE_SIGN and not noise_var > 0:
        raise ConfigError("noise_var: must be > 0")
    source = SourceSpec(kind, noise_var)

    lambdas = []
    if cp.has_section("sweep"):
        for key in cp["sweep"]:
            if key != "lambdas":
                raise ConfigError(f"{key}: unknown key in [sweep]")
        if "lambdas" in cp["sweep"]:
            lambdas = _floats("sweep", "lambda", cp["sweep"]["lambdas"])

    train = None
    if cp.has_section("train"):
        values = {}
        for key, raw in cp["train"].items():
            name = _TRAIN_ALIASES.get(key, key)
            if name not in _TRAIN_KEYS:
                raise ConfigError(f"{key}: unknown key in [train]")
            if name == "hidden":
                values[name] = tuple(int(v) for v in _floats("train", key, raw))
            elif name in _INT_KEYS:
                values[name] = _number("train", key, raw.strip(), int)
            elif name in _FLOAT_KEYS:
                values[name] = _number("train", "lambda" if name == "lam" else key, raw.strip(), float)
            else:
                values[name] = raw.strip()
        if "lam" not in values:
            if not lambdas:
                raise ConfigError("lambda: missing from [train] (and no [sweep] lambdas)")
            values["lam"] = lambdas[0]
        train = TrainConfig(**values)

    ev = cp["eval"] if cp.has_section("eval") else {}
    for key in ev:
        if key not in ("samples", "n_samples", "seed"):
            raise ConfigError(f"{key}: unknown key in [eval]")
    eval_samples = _number("eval", "samples", ev.get("samples", str(1 << 20)), int)
    if eval_samples < 10_000:
        raise ConfigError("samples: [eval] samples must be >= 10000")
    eval_n = _number("eval", "n_samples", ev["n_samples"], int) if "n_samples" in ev else None
    if eval_n is not None and eval_n < 1:
        raise ConfigError("n_samples: [eval] n_samples must be >= 1")
    eval_seed = _number("eval", "seed", ev.get("seed", "12345"), int)

    out = cp["output"] if cp.has_section("output") else {}
    for key in out:
        if key != "dir":
            raise ConfigError(f"{key}: unknown key in [output]")
    return ExperimentConfig(source, train, lambdas, eval_samples, eval_n, eval_seed,
                            out.get("dir", "runs"))


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    return parse(text)


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["source"] = {"kind": cfg.source.kind, "noise_var": repr(cfg.source.noise_var)}
    if cfg.train is not None:
        section = {}
        for name, value in cfg.train.to_dict().items():
            key = "lambda" if name == "lam" else name
            if name == "hidden":
                section[key] = ", ".join(str(h) for h in value)
            elif isinstance(value, float):
                section[key] = repr(value)
            else:
                section[key] = str(value)
        cp["train"] = section
    if cfg.lambdas:
        cp["sweep"] = {"lambdas": ", ".join(repr(float(v)) for v in cfg.lambdas)}
    ev = {"samples": str(cfg.eval_samples), "seed": str(cfg.eval_seed)}
    if cfg.eval_n is not None:
        ev["n_samples"] = str(cfg.eval_n)
    cp["eval"] = ev
    cp["output"] = {"dir": cfg.out_dir}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, seed=None, lambdas=None, out_dir=None) -> ExperimentConfig:
    train = cfg.train
    if seed is not None and train is not None:
        train = replace(train, seed=int(seed))
    if lambdas:
        if train is not None:
            train = replace(train, lam=float(lambdas[0]))
        else:
            raise ConfigError("variant: --lambda needs a [train] section")
    return replace(cfg, train=train, lambdas=list(lambdas) if lambdas else cfg.lambdas,
                   out_dir=out_dir if out_dir is not None else cfg.out_dir)
