"""Training loops: decoder pretraining, Lagrangian training and lambda sweeps."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import ad, models, ntc
from .sources import ConfigError, SourceSpec, sample_conditional_y, sample_pairs

log = logging.getLogger(__name__)

VARIANTS = (models.MARGINAL, models.CONDITIONAL, "ntc")


class TrainingError(RuntimeError):
    """Non-finite loss during training."""


@dataclass(frozen=True)
class TrainConfig:
    lam: float
    variant: str = models.MARGINAL
    K: int = 32
    epochs: int = 100
    pretrain_epochs: int = 30
    batch_size: int = 512
    n_samples: int = 24
    lr: float = 1e-3
    lr_final: float = 1e-4
    final_epochs: int = 10
    steps_per_epoch: int = 64
    pretrain_pairs: int = 0  # 0 means 2K
    hidden: tuple = (100, 100, 100)
    negative_slope: float = 0.2
    seed: int = 0
    t_hard: float = 0.8
    clip_norm: float = 1e3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lambda: must be a finite number >= 0, got {self.lam!r}")
        for name in ("K", "epochs", "batch_size", "n_samples", "steps_per_epoch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        for name in ("pretrain_epochs", "final_epochs", "pretrain_pairs"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if not 0 < self.lr_final < self.lr:
            raise ConfigError("lr_final: must satisfy 0 < lr_final < lr")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden: needs at least one positive width")
        if not 0.0 <= self.t_hard <= 1.0:
            raise ConfigError("t_hard: must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def n_pretrain_pairs(self) -> int:
        return self.pretrain_pairs or 2 * self.K

    def lr_at(self, epoch: int) -> float:
        return self.lr_final if epoch >= self.epochs - self.final_epochs else self.lr


def config_hash(*parts) -> str:
    """Short sha256 of the canonical JSON of ``parts``."""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _streams(seed: int):
    init, pre, data = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(pre), np.random.default_rng(data))


def build_for(config: TrainConfig, rng=None):
    """Fresh model for ``config`` (weights from the config seed's init stream)."""
    rng = rng if rng is not None else _streams(config.seed)[0]
    if config.variant == "ntc":
        return ntc.build_ntc(config.lam, config.hidden, config.negative_slope, rng, config.t_hard)
    return models.build_model(config.variant, config.K, config.lam, config.n_samples,
                              config.hidden, config.negative_slope, rng)


def _clip(store: ad.ParamStore, max_norm: float) -> float:
    norm = float(np.sqrt(np.dot(store.grads, store.grads)))
    if norm > max_norm:
        store.grads *= max_norm / norm
    return norm


def pretrain_decoder(model: models.WzModel, source: SourceSpec, config: TrainConfig,
                     rng=None) -> models.WzModel:
    """Fit the decoder to a fixed set of (uniform index, source sample) pairs.

    Only the lambda-weighted distortion term is minimised, with fresh
    conditional y-samples at every step, so each index is pulled toward its
    own few source samples and the initial reconstructions spread over the
    source range. One epoch is ``steps_per_epoch`` full-set steps.
    """
    if config.pretrain_epochs == 0:
        return model
    rng = rng if rng is not None else _streams(config.seed)[1]
    n = config.n_pretrain_pairs
    x, _ = sample_pairs(source, n, rng)
    k = rng.integers(0, model.K, size=n)
    n_y = 1 if source.deterministic_side_info else config.n_samples
    state = ad.AdamState(len(model.store), lr=config.lr)
    model.store.zero_grad()
    for _ in range(config.pretrain_epochs * config.steps_per_epoch):
        ys = sample_conditional_y(source, x, n_y, rng)
        loss = ad.mul(models.distortion_node(model, k, x, ys), model.lam)
        ad.backward(loss)
        _clip(model.store, config.clip_norm)
        ad.adam_step(model.store, state)
    return model


@dataclass
class TrainResult:
    model: object
    loss_trace: list = field(default_factory=list)
    config: TrainConfig | None = None


def _check_finite(loss: float, config: TrainConfig, epoch: int, store: ad.ParamStore):
    if not np.isfinite(loss):
        norm = float(np.linalg.norm(store.values))
        raise TrainingError(f"non-finite loss at lambda={config.lam}, epoch={epoch}, "
                            f"param norm={norm:.6g}")


def train(model, source: SourceSpec, config: TrainConfig, rng=None, progress=None) -> TrainResult:
    """Adam on batch losses of fresh samples; per-epoch mean loss is recorded.

    WZ models re-encode every batch (indices then held fixed for the
    gradient); NTC models anneal from dithered to hard quantization.
    """
    rng = rng if rng is not None else _streams(config.seed)[2]
    state = ad.AdamState(len(model.store), lr=config.lr)
    is_ntc = isinstance(model, ntc.NtcModel)
    total = config.epochs * config.steps_per_epoch
    trace = []
    model.store.zero_grad()
    step = 0
    for epoch in range(config.epochs):
        state.lr = config.lr_at(epoch)
        acc = 0.0
        for _ in range(config.steps_per_epoch):
            x, y = sample_pairs(source, config.batch_size, rng)
            if is_ntc:
                loss = ntc.ntc_loss(model, x, y, step / total, rng)
            else:
                ys = models.draw_encoder_samples(source, x, model.n_samples, rng)
                u = models.encode_with_samples(model, x, ys)
                loss = models.batch_loss(model, x, y, u)
            value = float(loss.value)
            _check_finite(value, config, epoch, model.store)
            ad.backward(loss)
            _clip(model.store, config.clip_norm)
            ad.adam_step(model.store, state)
            acc += value
            step += 1
        trace.append(acc / config.steps_per_epoch)
        if progress is not None:
            progress(epoch, trace[-1])
    return TrainResult(model, trace, config)


def run(source: SourceSpec, config: TrainConfig, progress=None) -> TrainResult:
    """Build, pretrain (WZ variants) and train one model; fully determined by the config seed."""
    init, pre, data = _streams(config.seed)
    model = build_for(config, init)
    if config.variant != "ntc":
        pretrain_decoder(model, source, config, pre)
    return train(model, source, config, data, progress)


# --- lambda sweeps ------------------------------------------------------------------

def run_id(config: TrainConfig) -> str:
    return f"{config.variant}-lam{config.lam:g}-s{config.seed}"


def _sweep_job(args):
    source_dict, config_dict, eval_samples, eval_seed, eval_n = args
    from . import evaluation
    source = SourceSpec.from_dict(source_dict)
    config = TrainConfig.from_dict(config_dict)
    try:
        result = run(source, config)
        points = evaluation.evaluate_any(result.model, source, eval_samples, eval_seed, eval_n)
        return {"status": "ok", "config": config_dict, "points": points,
                "model": result.model, "loss_trace": result.loss_trace}
    except (TrainingError, FloatingPointError, ValueError) as exc:
        return {"status": "failed", "config": config_dict, "error": str(exc)}


def lambda_sweep(source: SourceSpec, lams, template: TrainConfig, eval_samples: int = 1 << 20,
                 eval_seed: int = 12345, eval_n: int | None = None, parallel: int = 1,
                 skip=()):
    """One independent run per lambda; failures are reported and the sweep continues.

    Returns a list of job records (``status`` "ok" with evaluated points and the
    trained model, or "failed" with an error message) in the order of
    ``lams``. Lambdas whose run id is in ``skip`` are not run.
    """
    lams = list(lams)
    if not lams:
        raise ConfigError("lambda: the sweep needs at least one value")
    configs = [replace(template, lam=float(lam)) for lam in lams]
    jobs = [(source.to_dict(), c.to_dict(), eval_samples, eval_seed, eval_n)
            for c in configs if run_id(c) not in skip]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            records = list(pool.map(_sweep_job, jobs))
    else:
        records = [_sweep_job(j) for j in jobs]
    for rec in records:
        if rec["status"] != "ok":
            log.error("run lambda=%s failed: %s", rec["config"]["lam"], rec["error"])
    return records
