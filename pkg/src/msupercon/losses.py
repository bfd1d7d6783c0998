"""Training objectives: supervised contrastive loss and focal loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DegenerateInputError, ShapeError
from .numerics import Tensor

P_FLOOR = 1e-15
_LOG_P_FLOOR = float(np.log(P_FLOOR))

# number of p_t values raised to P_FLOOR since import (or the last reset)
clamp_events = 0


def reset_clamp_events() -> None:
    global clamp_events
    clamp_events = 0


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    alpha: float | tuple[float, ...] = 0.8
    gamma: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        values = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if np.any(values < 0) or np.any(values > 1):
            raise ConfigError(f"alpha entries must lie in [0, 1], got {self.alpha}")
        if not np.isscalar(self.alpha):
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))

    def alpha_vector(self, num_classes: int) -> np.ndarray:
        """Per-class balancing weights; a scalar alpha is broadcast."""
        if np.isscalar(self.alpha):
            return np.full(num_classes, float(self.alpha))
        vec = np.asarray(self.alpha, dtype=float)
        if vec.shape != (num_classes,):
            raise ConfigError(f"alpha has {vec.size} entries but there are {num_classes} classes")
        return vec


@dataclass
class LabeledEmbeddingBatch:
    embeddings: Tensor
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.embeddings = nx.as_tensor(self.embeddings)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        validate_embedding_batch(self.embeddings, self.labels, self.num_classes)


def validate_embedding_batch(z: Tensor, labels: np.ndarray, num_classes: int | None = None, atol: float = 1e-9) -> None:
    if z.ndim != 2:
        raise ShapeError(f"embeddings must be (N, d), got {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match {z.shape[0]} embeddings")
    if z.shape[0] < 1:
        raise DegenerateInputError("empty embedding batch")
    if labels.min() < 0 or (num_classes is not None and labels.max() >= num_classes):
        raise ConfigError(f"labels outside [0, {num_classes})")
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise DegenerateInputError(f"embeddings must be unit-norm; worst norm {norms[np.argmax(np.abs(norms - 1))]:.12f}")


def positive_mask(labels: np.ndarray) -> np.ndarray:
    """``mask[i, j]`` is True when j != i shares i's label."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return same


def supervised_contrastive_loss(z, labels, tau: float = 0.1, *, check_unit_norm: bool = True) -> Tensor:
    """Summed supervised contrastive loss over all anchors of the batch.

    For anchor i, every other same-label sample is a positive and every other
    sample belongs to the contrast set. Anchors without positives contribute 0.
    ``z`` must hold L2-normalized rows unless ``check_unit_norm`` is False.
    """
    z = nx.as_tensor(z)
    labels = np.asarray(labels, dtype=np.int64)
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if z.ndim != 2:
        raise ShapeError(f"embeddings must be (N, d), got {z.shape}")
    if z.shape[0] < 2:
        raise DegenerateInputError(f"contrastive loss needs at least 2 samples, got {z.shape[0]}")
    if check_unit_norm:
        validate_embedding_batch(z, labels)
    elif labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match {z.shape[0]} embeddings")

    n = z.shape[0]
    others = ~np.eye(n, dtype=bool)
    pos = positive_mask(labels)
    counts = pos.sum(axis=1)
    weights = pos / np.maximum(counts, 1)[:, None]

    logits = nx.matmul(z, nx.transpose(z)) * (1.0 / tau)
    log_prob = nx.log_softmax(logits, axis=1, mask=others)
    return -nx.tsum(log_prob * weights)


def _gather_true(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    return log_probs[np.arange(len(labels)), labels]


def focal_loss(probabilities=None, labels=None, config: LossConfig | None = None, *, log_probabilities=None) -> Tensor:
    """Mean over samples of ``-alpha_t * (1 - p_t)**gamma * log(p_t)``.

    Pass either class ``probabilities`` (N, C) or, preferably, their
    ``log_probabilities``. ``p_t`` below 1e-15 is clamped (counted in
    ``clamp_events``).
    """
    global clamp_events
    config = config or LossConfig()
    if (probabilities is None) == (log_probabilities is None):
        raise ConfigError("pass exactly one of probabilities / log_probabilities")
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities is not None:
        probs = nx.as_tensor(probabilities)
        _check_rows(probs, labels)
        row_sums = probs.data.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9):
            raise ShapeError("probability rows must sum to 1")
        p_true = probs[np.arange(len(labels)), labels]
        low = p_true.data < P_FLOOR
        if np.any(low):
            clamp_events += int(low.sum())
            warnings.warn(f"{int(low.sum())} ground-truth probabilities clamped to {P_FLOOR:g}", RuntimeWarning, stacklevel=2)
            p_true = nx.add(nx.mul(p_true, ~low), np.where(low, P_FLOOR, 0.0))
        log_pt = nx.log(p_true)
    else:
        logp = nx.as_tensor(log_probabilities)
        _check_rows(logp, labels)
        log_pt = _gather_true(logp, labels)
        low = log_pt.data < _LOG_P_FLOOR
        if np.any(low):
            clamp_events += int(low.sum())
            warnings.warn(f"{int(low.sum())} ground-truth probabilities clamped to {P_FLOOR:g}", RuntimeWarning, stacklevel=2)
            log_pt = nx.add(nx.mul(log_pt, ~low), np.where(low, _LOG_P_FLOOR, 0.0))
        p_true = nx.exp(log_pt)

    alpha_t = config.alpha_vector(_num_columns(probabilities, log_probabilities))[labels]
    per_sample = log_pt * (-alpha_t)
    if config.gamma != 0:
        per_sample = per_sample * nx.power(1.0 - p_true, config.gamma)
    return nx.mean(per_sample)


def _num_columns(probabilities, log_probabilities) -> int:
    src = probabilities if probabilities is not None else log_probabilities
    return nx.as_tensor(src).shape[1]


def _check_rows(t: Tensor, labels: np.ndarray) -> None:
    if t.ndim != 2:
        raise ShapeError(f"expected (N, C) class scores, got {t.shape}")
    if labels.shape != (t.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match {t.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= t.shape[1]):
        raise ConfigError(f"labels outside [0, {t.shape[1]})")


def cross_entropy(probabilities=None, labels=None, *, log_probabilities=None) -> Tensor:
    """Focal loss with gamma=0 and unit balancing weights."""
    num_classes = _num_columns(probabilities, log_probabilities)
    config = LossConfig(tau=1.0, alpha=tuple([1.0] * num_classes), gamma=0.0)
    return focal_loss(probabilities, labels, config, log_probabilities=log_probabilities)
