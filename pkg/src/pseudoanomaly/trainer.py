"""Alternating generator / discriminator training with label-gated losses."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .datasets import BatchSpec, ImageCorpus, OneClassSplit, epoch_batches
from .losses import (
    LossBreakdown,
    LossWeights,
    adversarial_loss,
    anomaly_loss,
    contextual_adversarial_loss,
    contextual_loss,
    discriminator_loss,
    final_loss,
    latent_loss,
    normality_loss,
)
from .models import (
    BNStrategy,
    Discriminator,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    forward_discriminator,
    forward_generator,
)
from .scoring import population_sd, score_model

log = logging.getLogger(__name__)


class TrainingConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"non-finite loss at step {step}: {term} = {value}")
        self.step = step
        self.term = term
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 256
    min_anomalies: int = 32
    epochs: int = 15
    weights: LossWeights = LossWeights()
    bn_strategy: BNStrategy = BNStrategy()
    backbone: GeneratorSpec = GeneratorSpec()
    disc_width: int = 64
    adcon_enabled: bool = True
    seed: int = 0
    optimizer_betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    image_size: int = 32
    eval_every: int = 1
    # Declared discriminator-reset threshold. Never consulted by the training loop.
    reset_threshold: float | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise TrainingConfigError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise TrainingConfigError("epochs must be >= 1")
        if self.eval_every < 1:
            raise TrainingConfigError("eval_every must be >= 1")
        BatchSpec(self.batch_size, self.min_anomalies)

    @property
    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.batch_size, self.min_anomalies)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer_betas"] = list(self.optimizer_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "bn_strategy" in d:
            s = d["bn_strategy"]
            d["bn_strategy"] = BNStrategy.from_name(s) if isinstance(s, str) else BNStrategy(**s)
        if "backbone" in d:
            b = d["backbone"]
            d["backbone"] = GeneratorSpec(backbone=b) if isinstance(b, str) else GeneratorSpec(**b)
        if "optimizer_betas" in d:
            d["optimizer_betas"] = tuple(d["optimizer_betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainingConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Models(NamedTuple):
    generator: torch.nn.Module
    discriminator: Discriminator


class Optimizers(NamedTuple):
    generator: torch.optim.Optimizer
    discriminator: torch.optim.Optimizer


def build_models(config: TrainConfig) -> Models:
    torch.manual_seed(config.seed)
    spec = config.backbone
    if config.bn_strategy.auxiliary_for_pseudo and not spec.auxiliary_bn:
        spec = replace(spec, auxiliary_bn=True)
    return Models(build_generator(spec, config.image_size), build_discriminator(spec.in_channels, config.disc_width))


def build_optimizers(models: Models, config: TrainConfig) -> Optimizers:
    make = lambda m: torch.optim.Adam(m.parameters(), lr=config.learning_rate, betas=config.optimizer_betas)
    return Optimizers(make(models.generator), make(models.discriminator))


# One step ##################################################################################


def _check_finite(step: int, terms: dict) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(step, name, v)


def _apply(params: list[torch.nn.Parameter], grads) -> None:
    for p, g in zip(params, grads):
        p.grad = g


class StepLosses(NamedTuple):
    generator: torch.Tensor
    discriminator: torch.Tensor
    terms: dict
    n_normal: int
    n_anomaly: int


def compute_losses(x: torch.Tensor, y: torch.Tensor, models: Models, config: TrainConfig) -> StepLosses:
    """Generator and discriminator objectives for one labelled batch.

    The batch is partitioned by label; normals feed the normality loss and the
    real/fake discriminator terms, true anomalies the reciprocal anomaly loss and
    the anomaly discriminator term.
    """
    g, d = models
    strategy, w = config.bn_strategy, config.weights
    y = torch.as_tensor(y)
    xn, xa = x[y == 0], x[y == 1]
    terms: dict[str, torch.Tensor] = {}
    lg_n = lg_a = None
    y_real = y_fake = y_anom = None

    if len(xn):
        xh = forward_generator(g, xn, "real", strategy)
        y_real, z = forward_discriminator(d, xn, False, strategy)
        y_fake, z_hat = forward_discriminator(d, xh, False, strategy)
        terms["l_adv"] = adversarial_loss(y_fake, 1)
        terms["l_con"] = contextual_loss(xn, xh)
        terms["l_lat"] = latent_loss(z, z_hat)
        if config.adcon_enabled:
            terms["l_adcon"] = contextual_adversarial_loss(xh, forward_generator(g, xh, "pseudo", strategy))
        else:
            terms["l_adcon"] = torch.zeros((), dtype=x.dtype)
        lg_n = normality_loss(terms["l_adv"], terms["l_con"], terms["l_adcon"], terms["l_lat"], w)
        terms["l_normality"] = lg_n

    if len(xa):
        xh_a = forward_generator(g, xa, "real", strategy, is_true_anomaly=True)
        y_anom, z_a = forward_discriminator(d, xa, True, strategy)
        y_fake_a, z_hat_a = forward_discriminator(d, xh_a, True, strategy)
        terms["l_adv_anom"] = adversarial_loss(y_fake_a, 0)
        terms["l_lat_anom"] = latent_loss(z_a, z_hat_a)
        adcon_a = None
        if config.adcon_enabled:
            adcon_a = contextual_adversarial_loss(
                xh_a, forward_generator(g, xh_a, "pseudo", strategy, is_true_anomaly=True)
            )
            terms["l_adcon_anom"] = adcon_a
        lg_a = anomaly_loss(terms["l_adv_anom"], adcon_a, terms["l_lat_anom"], w, config.eps)
        terms["l_anomaly"] = lg_a

    l_total = final_loss(lg_n, lg_a)
    l_disc = discriminator_loss(y_real, y_fake, y_anom)
    terms["l_total"], terms["l_disc"] = l_total, l_disc
    return StepLosses(l_total, l_disc, terms, len(xn), len(xa))


def train_step(
    x: torch.Tensor,
    y: torch.Tensor,
    models: Models,
    optimizers: Optimizers,
    config: TrainConfig,
    step: int = 0,
) -> LossBreakdown:
    """One generator update followed by one discriminator update. Both gradients
    are taken at the same point before either parameter set moves."""
    g, d = models
    g.train()
    d.train()
    losses = compute_losses(x, y, models, config)
    _check_finite(step, losses.terms)

    g_params = [p for p in g.parameters() if p.requires_grad]
    d_params = [p for p in d.parameters() if p.requires_grad]
    g_grads = torch.autograd.grad(losses.generator, g_params, retain_graph=True, allow_unused=True)
    d_grads = torch.autograd.grad(losses.discriminator, d_params, allow_unused=True)
    optimizers.generator.zero_grad(set_to_none=True)
    optimizers.discriminator.zero_grad(set_to_none=True)
    _apply(g_params, g_grads)
    optimizers.generator.step()
    _apply(d_params, d_grads)
    optimizers.discriminator.step()

    out = LossBreakdown(n_normal=losses.n_normal, n_anomaly=losses.n_anomaly)
    for name, value in losses.terms.items():
        setattr(out, name, float(value.detach()))
    return out


# Checkpoints ###############################################################################


@dataclass
class CheckpointBundle:
    models: Models
    optimizers: Optimizers
    epoch: int
    config: TrainConfig
    meta: dict

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.models.generator.state_dict(), directory / "generator.pt")
        torch.save(self.models.discriminator.state_dict(), directory / "discriminator.pt")
        torch.save(
            {"generator": self.optimizers.generator.state_dict(),
             "discriminator": self.optimizers.discriminator.state_dict()},
            directory / "optimizers.pt",
        )
        meta = {
            **self.meta,
            "epoch": self.epoch,
            "seed": self.config.seed,
            "config_hash": self.config.config_hash(),
            "generator_spec": self.models.generator.spec.to_dict(),
            "bn_strategy": self.config.bn_strategy.name,
            "image_size": self.config.image_size,
            "train_config": self.config.to_dict(),
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "CheckpointBundle":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        config = TrainConfig.from_dict(meta["train_config"])
        config = replace(config, backbone=GeneratorSpec(**meta["generator_spec"]))
        models = build_models(config)
        models.generator.load_state_dict(torch.load(directory / "generator.pt", weights_only=True))
        models.discriminator.load_state_dict(torch.load(directory / "discriminator.pt", weights_only=True))
        optimizers = build_optimizers(models, config)
        states = torch.load(directory / "optimizers.pt", weights_only=True)
        optimizers.generator.load_state_dict(states["generator"])
        optimizers.discriminator.load_state_dict(states["discriminator"])
        return cls(models, optimizers, int(meta["epoch"]), config, meta)


# Runs ######################################################################################


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_auroc: float | None = None
    last_auroc: float | None = None
    wall_clock: float = 0.0
    checkpoints: dict = field(default_factory=dict)
    model_selection: str = "last"

    @property
    def final_auroc(self) -> float | None:
        return self.last_auroc

    @property
    def aurocs(self) -> list[float]:
        return [e["auroc"] for e in self.epochs if e.get("auroc") is not None]

    def to_json(self) -> dict:
        d = asdict(self)
        d["final_auroc"] = self.final_auroc
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**d)


def check_compatibility(corpus: ImageCorpus, split: OneClassSplit, config: TrainConfig) -> TrainConfig:
    """Validate data against the model config; returns the config with channels taken from the data."""
    if config.backbone.in_channels != corpus.channels:
        config = replace(config, backbone=replace(config.backbone, in_channels=corpus.channels))
    try:
        config.backbone.check_size(config.image_size)
    except ValueError as e:
        raise TrainingConfigError(str(e)) from None
    if not split.train_normals:
        raise TrainingConfigError("split has no normal training examples")
    if not split.test:
        raise TrainingConfigError("split has no test examples")
    labels = split.test_labels
    if labels.min() == labels.max():
        raise TrainingConfigError("test set must contain both normal and anomalous examples")
    corpus.indices(split.train_normals[:1] + split.train_anomalies[:1])
    return config


def evaluate(generator: torch.nn.Module, corpus: ImageCorpus, split: OneClassSplit, image_size: int):
    return score_model(generator, corpus, split.test, image_size)


def train_run(
    corpus: ImageCorpus,
    split: OneClassSplit,
    config: TrainConfig,
    run_dir=None,
    resume_from=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> RunRecord:
    """Train for ``config.epochs`` epochs, evaluating test AUROC every ``eval_every`` epochs.

    With ``run_dir`` set, writes ``train.log.jsonl``, ``run.json`` and
    ``checkpoints/{last,best}``. ``resume_from`` names a checkpoint directory to
    continue from; the run then picks up at the checkpoint's epoch.
    """
    config = check_compatibility(corpus, split, config)
    run_dir = Path(run_dir) if run_dir is not None else None
    record = RunRecord(seed=config.seed, config_hash=config.config_hash())
    start_epoch, step = 0, 0

    if resume_from is not None:
        bundle = CheckpointBundle.load(resume_from)
        models, optimizers = bundle.models, bundle.optimizers
        for group in (*optimizers.generator.param_groups, *optimizers.discriminator.param_groups):
            group["lr"] = config.learning_rate
        start_epoch = bundle.epoch
        step = bundle.meta.get("step", 0)
        prior = bundle.meta.get("record")
        if prior:
            record = RunRecord.from_json(prior)
            record.config_hash = config.config_hash()
    else:
        models = build_models(config)
        optimizers = build_optimizers(models, config)

    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "train.log.jsonl", "a" if resume_from is not None else "w")
    started = time.perf_counter()
    try:
        for epoch in range(start_epoch, config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            steps = []
            for batch in epoch_batches(split, config.batch_spec, rng):
                x = corpus.images(batch.ids, config.image_size)
                try:
                    br = train_step(x, torch.from_numpy(batch.y), models, optimizers, config, step)
                except NonFiniteLossError as e:
                    if log_file:
                        log_file.write(json.dumps({"type": "abort", "epoch": epoch, "step": e.step,
                                                   "term": e.term, "value": str(e.value)}) + "\n")
                    raise
                steps.append(br)
                if log_file:
                    log_file.write(json.dumps({"type": "step", "epoch": epoch, "step": step, **br.to_dict()}) + "\n")
                step += 1
            summary = {"epoch": epoch + 1, **LossBreakdown.mean(steps).to_dict(), "auroc": None}
            if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
                summary["auroc"] = evaluate(models.generator, corpus, split, config.image_size).auroc
            record.epochs.append(summary)
            if log_file:
                log_file.write(json.dumps({"type": "epoch", **summary}) + "\n")
                log_file.flush()
            log.info("epoch %d/%d auroc=%s l_total=%.4f", epoch + 1, config.epochs, summary["auroc"], summary["l_total"])

            auc = summary["auroc"]
            improved = auc is not None and (record.best_auroc is None or auc > record.best_auroc)
            if auc is not None:
                record.last_auroc = auc
            if improved:
                record.best_auroc, record.best_epoch = auc, epoch + 1
            if run_dir is not None:
                bundle = CheckpointBundle(models, optimizers, epoch + 1, config,
                                          {"step": step, "auroc": auc, "record": record.to_json()})
                bundle.save(run_dir / "checkpoints" / "last")
                record.checkpoints["last"] = "checkpoints/last"
                if improved:
                    bundle.save(run_dir / "checkpoints" / "best")
                    record.checkpoints["best"] = "checkpoints/best"
            if on_epoch:
                on_epoch(summary)
    finally:
        if log_file:
            log_file.close()
    record.wall_clock += time.perf_counter() - started
    if run_dir is not None:
        (run_dir / "run.json").write_text(json.dumps(record.to_json(), indent=1))
    return record


@dataclass
class MultiSeedRecord:
    seeds: list[int]
    runs: list[RunRecord]
    failed: dict[int, str]
    mean_auroc: float | None
    sd_auroc: float | None
    sd_convention: str = "population"

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    @property
    def aurocs(self) -> list[float]:
        return [r.final_auroc for r in self.runs]

    def to_json(self) -> dict:
        return {
            "seeds": self.seeds,
            "final_aurocs": [[r.seed, r.final_auroc] for r in self.runs],
            "failed": {str(s): m for s, m in self.failed.items()},
            "partial": self.partial,
            "mean_auroc": self.mean_auroc,
            "sd_auroc": self.sd_auroc,
            "sd_convention": self.sd_convention,
        }


def aggregate_seeds(aurocs: Sequence[float]) -> tuple[float, float]:
    return float(np.mean(aurocs)), population_sd(aurocs)


def train_multi_seed(
    corpus: ImageCorpus,
    split: OneClassSplit | Callable[[int], OneClassSplit],
    config: TrainConfig,
    seeds: Sequence[int],
    run_root=None,
) -> MultiSeedRecord:
    """Run :func:`train_run` once per seed. ``split`` may be a callable mapping a
    seed to its split, for protocols that resample anomalies per run."""
    if not seeds:
        raise TrainingConfigError("need at least one seed")
    runs, failed = [], {}
    for k, seed in enumerate(seeds):
        run_dir = Path(run_root) / f"run{k}-seed{seed}" if run_root is not None else None
        try:
            cell_split = split(seed) if callable(split) else split
            runs.append(train_run(corpus, cell_split, replace(config, seed=seed), run_dir))
        except Exception as e:  # noqa: BLE001 - a seed failure marks the aggregate partial
            log.exception("seed %d failed", seed)
            failed[seed] = f"{type(e).__name__}: {e}"
    aucs = [r.final_auroc for r in runs]
    mean, sd = aggregate_seeds(aucs) if aucs else (None, None)
    return MultiSeedRecord(list(seeds), runs, failed, mean, sd)
