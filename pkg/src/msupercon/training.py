"""Two-stage training: contrastive representation learning, then frozen-encoder fine-tuning."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .data import AugmentPolicy, Dataset, augment_arrays, batch_iter
from .errors import ConfigError, DegenerateInputError, NumericalError, UsageError
from .evaluation import evaluate_classifier, evaluate_embeddings
from .losses import LossConfig, cross_entropy, focal_loss, positive_mask, supervised_contrastive_loss
from .model import (
    ModelConfig,
    ModelParams,
    aux_statistics,
    classifier_logits,
    encoder_forward,
    fused_features,
    init_params,
    projection_forward,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STAGE1_GROUPS = ("encoder", "projection")
STAGE2_GROUPS = ("aux_featurizer", "classifier")
CHECKPOINT_NAME = "model.mscn"
REPORT_NAME = "report.jsonl"
SUMMARY_NAME = "summary.json"


def deterministic_mode() -> bool:
    return os.environ.get("MSCN_DETERMINISTIC", "") not in ("", "0")


@contextlib.contextmanager
def thread_limits():
    """Cap BLAS threads from MSCN_THREADS (1 in deterministic mode)."""
    limit = os.environ.get("MSCN_THREADS")
    n = 1 if deterministic_mode() else (int(limit) if limit else None)
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ------------------------------------------------------------------ optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")


class Optimizer:
    """Plain gradient descent or Adam over the non-frozen tensors of a ModelParams."""

    def __init__(self, config: OptimizerConfig | None = None):
        self.config = config or OptimizerConfig()
        self.iteration = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> ModelParams:
        cfg = self.config
        lr = cfg.learning_rate
        updates = []
        for name, t in params.named():
            if t.frozen or name not in grads:
                continue
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != t.shape:
                raise UsageError(f"gradient for {name} has shape {g.shape}, parameter has {t.shape}")
            updates.append((name, t, g))
        self.iteration += 1
        n = self.iteration
        for name, t, g in updates:
            if cfg.kind == "sgd":
                t.data = t.data - lr * g
                continue
            m = cfg.beta1 * self._m.get(name, 0.0) + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * self._v.get(name, 0.0) + (1.0 - cfg.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1.0 - cfg.beta1 ** n)
            v_hat = v / (1.0 - cfg.beta2 ** n)
            t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return params


def optimizer_step(params: ModelParams, grads: Mapping[str, np.ndarray], optimizer: Optimizer) -> ModelParams:
    return optimizer.step(params, grads)


def named_gradients(params: ModelParams, tape_grads: Mapping[nx.Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: tape_grads[t] for name, t in params.named() if t in tape_grads}


# --------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 15
    epochs_stage2: int = 10
    batch_size: int = 16
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer_stage1: OptimizerConfig = field(default_factory=OptimizerConfig)
    optimizer_stage2: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    classification_loss: str = "focal"
    two_view: bool = False

    def __post_init__(self):
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ConfigError("epoch counts must be at least 1")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2 for the contrastive stage, got {self.batch_size}")
        if self.classification_loss not in ("focal", "cross_entropy"):
            raise ConfigError(f"classification_loss must be 'focal' or 'cross_entropy', got {self.classification_loss!r}")


def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# --------------------------------------------------------------------- report


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    mean_loss: float
    train_accuracy: float | None
    seconds: float

    def to_json(self) -> str:
        return json.dumps({
            "stage": self.stage,
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "train_accuracy": self.train_accuracy,
            "seconds": self.seconds,
        })


@dataclass
class TrainReport:
    seed: int
    config: dict
    records: list[EpochRecord] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    def losses(self, stage: int) -> list[float]:
        return [r.mean_loss for r in self.records if r.stage == stage]

    def extend(self, other: "TrainReport") -> "TrainReport":
        self.records += other.records
        self.validation += other.validation
        for k, v in other.counters.items():
            self.counters[k] = self.counters.get(k, 0) + v
        return self

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "counters": self.counters,
            "validation": self.validation,
            "final": self.final,
        }


def _elapsed(t0: float) -> float:
    return 0.0 if deterministic_mode() else round(time.perf_counter() - t0, 6)


def _check_finite(loss: nx.Tensor, stage: int, epoch: int, batch: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss in stage {stage}, epoch {epoch}, batch {batch}", stage=stage, epoch=epoch, batch=batch)
    return value


@contextlib.contextmanager
def _located(stage: int, epoch: int, batch: int):
    """Report a collapsed forward pass (e.g. zero-norm embeddings) as a numerical failure."""
    try:
        yield
    except DegenerateInputError as exc:
        raise NumericalError(f"{exc} in stage {stage}, epoch {epoch}, batch {batch}", stage=stage, epoch=epoch, batch=batch) from exc


# -------------------------------------------------------------------- stage 1


def _stage1_batch(dataset: Dataset, idx, config: TrainConfig, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    views = 2 if config.two_view else 1
    images, labels = [], []
    for v in range(views):
        for i in idx:
            seed = [config.seed, 1, epoch, int(i), v]
            images.append(augment_arrays(dataset[int(i)].image, {}, config.augment, seed)[0])
            labels.append(dataset.labels[i])
    return np.stack(images), np.asarray(labels)


def contrastive_loss_on(params: ModelParams, dataset: Dataset, tau: float, batch_size: int = 16) -> float:
    """Mean summed contrastive loss over unaugmented, unshuffled batches of ``dataset``."""
    values = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        if len(idx) < 2:
            continue
        z = projection_forward(encoder_forward(dataset.images(idx), params), params)
        values.append(supervised_contrastive_loss(z, dataset.labels[idx], tau).item())
    return float(np.mean(values)) if values else float("nan")


def train_representation(train: Dataset, config: TrainConfig, params: ModelParams | None = None, val: Dataset | None = None) -> tuple[ModelParams, TrainReport]:
    """Stage 1: update encoder and projection head with the supervised contrastive loss."""
    params = params if params is not None else init_params(config.model, config.seed)
    for g in STAGE1_GROUPS:
        params.unfreeze(g)
    for g in STAGE2_GROUPS:
        params.freeze(g)
    opt = Optimizer(config.optimizer_stage1)
    report = TrainReport(seed=config.seed, config=_plain(config))
    report.counters.update({"stage1_batches": 0, "stage1_no_positive_batches": 0, "stage1_skipped_singletons": 0})

    for epoch in range(1, config.epochs_stage1 + 1):
        t0 = time.perf_counter()
        batch_losses = []
        for b, idx in enumerate(batch_iter(len(train), config.batch_size, config.seed, epoch, contrastive=True)):
            if len(idx) < 2:
                report.counters["stage1_skipped_singletons"] += 1
                continue
            images, labels = _stage1_batch(train, idx, config, epoch)
            report.counters["stage1_batches"] += 1
            if not positive_mask(labels).any():
                report.counters["stage1_no_positive_batches"] += 1
                batch_losses.append(0.0)
                continue
            with _located(1, epoch, b), nx.GradientTape() as tape:
                z = projection_forward(encoder_forward(images, params), params)
                loss = supervised_contrastive_loss(z, labels, config.loss.tau)
            batch_losses.append(_check_finite(loss, 1, epoch, b))
            opt.step(params, named_gradients(params, tape.backward(loss)))
        report.records.append(EpochRecord(1, epoch, float(np.mean(batch_losses)), None, _elapsed(t0)))
        if val is not None:
            report.validation.append({"stage": 1, "epoch": epoch, "split": "val",
                                      "contrastive_loss": contrastive_loss_on(params, val, config.loss.tau, config.batch_size)})
        log.info("stage 1 epoch %d loss %.4f", epoch, report.records[-1].mean_loss)
    return params, report


# -------------------------------------------------------------------- stage 2


def _stage2_batch(dataset: Dataset, idx, names, config: TrainConfig, epoch: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    images = []
    stats: dict[str, list] = {n: [] for n in names}
    for i in idx:
        s = dataset[int(i)]
        rasters = {n: s.aux[n] for n in names if isinstance(s.aux[n], np.ndarray)}
        image, warped = augment_arrays(s.image, rasters, config.augment, [config.seed, 2, epoch, int(i)])
        images.append(image)
        for n in names:
            stats[n].append(aux_statistics(warped.get(n, s.aux[n])))
    return np.stack(images), {n: np.stack(v) for n, v in stats.items()}


def classification_loss(logits: nx.Tensor, labels: np.ndarray, config: TrainConfig) -> nx.Tensor:
    log_probs = nx.log_softmax(logits, axis=-1)
    if config.classification_loss == "cross_entropy":
        return cross_entropy(labels=labels, log_probabilities=log_probs)
    return focal_loss(labels=labels, config=config.loss, log_probabilities=log_probs)


def train_classifier(train: Dataset, params: ModelParams, config: TrainConfig, val: Dataset | None = None) -> tuple[ModelParams, TrainReport]:
    """Stage 2: freeze encoder and projection; fit aux featurizer and classifier on fused inputs."""
    names = params.config.aux_names
    missing = [n for n in names if n not in train.aux_available]
    if missing:
        raise ConfigError(f"num_aux={params.config.num_aux} needs auxiliaries {list(names)}, manifest lacks {missing}")
    for g in STAGE1_GROUPS:
        params.freeze(g)
    for g in STAGE2_GROUPS:
        params.unfreeze(g)
    opt = Optimizer(config.optimizer_stage2)
    report = TrainReport(seed=config.seed, config=_plain(config))

    for epoch in range(1, config.epochs_stage2 + 1):
        t0 = time.perf_counter()
        batch_losses, correct = [], 0
        for b, idx in enumerate(batch_iter(len(train), config.batch_size, config.seed, epoch)):
            images, stats = _stage2_batch(train, idx, names, config, epoch)
            labels = train.labels[idx]
            with _located(2, epoch, b), nx.GradientTape() as tape:
                logits = classifier_logits(fused_features(images, stats, params), params)
                loss = classification_loss(logits, labels, config)
            batch_losses.append(_check_finite(loss, 2, epoch, b))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            opt.step(params, named_gradients(params, tape.backward(loss)))
        mean_loss = float(np.mean(batch_losses))
        report.records.append(EpochRecord(2, epoch, mean_loss, correct / len(train), _elapsed(t0)))
        if val is not None:
            ev = evaluate_classifier(params, val)
            report.validation.append({"stage": 2, "epoch": epoch, "split": "val", "accuracy": ev.accuracy})
        log.info("stage 2 epoch %d loss %.4f acc %.3f", epoch, mean_loss, correct / len(train))
    return params, report


# ------------------------------------------------------------------- pipeline


def run_pipeline(
    config: TrainConfig,
    train: Dataset,
    *,
    val: Dataset | None = None,
    test: Dataset | None = None,
    out_dir=None,
    stage1_only: bool = False,
) -> tuple[ModelParams, TrainReport]:
    """Stage 1 then (unless ``stage1_only``) stage 2; optionally write checkpoint and reports."""
    # non-finite values are caught explicitly by the finite check, so silence numpy's warnings
    with thread_limits(), np.errstate(over="ignore", invalid="ignore"):
        params = init_params(config.model, config.seed)
        params, report = train_representation(train, config, params, val)
        if not stage1_only:
            params, report2 = train_classifier(train, params, config, val)
            report.extend(report2)
        for split, ds in (("val", val), ("test", test)):
            if ds is None:
                continue
            entry: dict = {"embedding_quality": evaluate_embeddings(params, ds).to_dict()}
            if not stage1_only:
                entry.update(evaluate_classifier(params, ds).to_dict())
            report.final[split] = entry
    if out_dir is not None:
        write_outputs(params, report, out_dir)
    return params, report


def write_outputs(params: ModelParams, report: TrainReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / CHECKPOINT_NAME)
    (out / REPORT_NAME).write_text(report.to_jsonl())
    (out / SUMMARY_NAME).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return out
