"""Classification metrics and embedding-space quality."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .model import ModelParams, classifier_logits, encoder_forward, fuse, featurize_stats, projection_forward


@dataclass
class ClassifierEvaluation:
    accuracy: float
    per_class_recall: list[float | None]
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_recall": self.per_class_recall,
            "confusion": self.confusion.astype(int).tolist(),
        }


@dataclass
class EmbeddingQuality:
    intra_cosine: float
    inter_cosine: float
    separation_ratio: float
    silhouette: float
    singleton_classes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def classification_metrics(labels, predictions, num_classes: int) -> ClassifierEvaluation:
    cm = confusion_matrix(labels, predictions, num_classes)
    total = int(cm.sum())
    accuracy = float(np.trace(cm) / total) if total else float("nan")
    support = cm.sum(axis=1)
    recall = [float(cm[c, c] / support[c]) if support[c] else None for c in range(num_classes)]
    return ClassifierEvaluation(accuracy, recall, cm)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def predict_logits(params: ModelParams, dataset, batch_size: int = 64) -> np.ndarray:
    """Classifier logits for every sample, without augmentation."""
    names = params.config.aux_names
    missing = [n for n in names if n not in dataset.aux_available]
    if missing:
        raise ConfigError(f"dataset lacks auxiliaries {missing} required by the model")
    stats = {n: dataset.aux_stats(n) for n in names}
    out = []
    for idx in _batches(len(dataset), batch_size):
        rep = encoder_forward(dataset.images(idx), params)
        feats = [featurize_stats(stats[n][idx], params, n) for n in names]
        out.append(classifier_logits(fuse(rep, feats, len(names)), params).data)
    return np.concatenate(out)


def evaluate_classifier(params: ModelParams, dataset, batch_size: int = 64) -> ClassifierEvaluation:
    """Argmax accuracy, per-class recall (None for classes without support) and confusion matrix."""
    if dataset.num_classes != params.config.num_classes:
        raise ConfigError(f"model has {params.config.num_classes} classes but dataset has {dataset.num_classes}")
    preds = np.argmax(predict_logits(params, dataset, batch_size), axis=1)
    return classification_metrics(dataset.labels, preds, params.config.num_classes)


def embed(params: ModelParams, dataset, batch_size: int = 64) -> np.ndarray:
    """Unit-norm projection-head embeddings, one row per sample."""
    out = []
    for idx in _batches(len(dataset), batch_size):
        out.append(projection_forward(encoder_forward(dataset.images(idx), params), params).data)
    return np.concatenate(out)


def embedding_quality(embeddings, labels) -> EmbeddingQuality:
    """Cosine-based clustering quality of unit-norm embeddings.

    Intra/inter are means over all unordered within-/across-class pairs.
    Silhouette uses cosine distance 1 - cos; a sample whose a and b are both 0
    scores 0, as does a sample alone in its class.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ConfigError("embedding quality needs at least two classes")
    singletons = int(np.sum(counts < 2))

    cos = np.clip(z @ z.T, -1.0, 1.0)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same), k=1)
    intra_pairs = same & upper
    inter_pairs = ~same & upper
    intra = float(cos[intra_pairs].mean()) if intra_pairs.any() else float("nan")
    inter = float(cos[inter_pairs].mean())

    dist = 1.0 - cos
    np.fill_diagonal(dist, 0.0)
    n = len(z)
    member = labels[:, None] == classes[None, :]  # (N, K)
    sums = dist @ member  # (N, K) summed distance to each class
    own = np.argmax(member, axis=1)
    own_count = counts[own]
    s = np.zeros(n)
    for i in range(n):
        if own_count[i] < 2:
            continue
        a = sums[i, own[i]] / (own_count[i] - 1)
        others = [sums[i, k] / counts[k] for k in range(len(classes)) if k != own[i]]
        b = min(others)
        m = max(a, b)
        s[i] = 0.0 if m <= 0 else (b - a) / m
    return EmbeddingQuality(
        intra_cosine=intra,
        inter_cosine=inter,
        separation_ratio=(1.0 + intra) / (1.0 + inter) if inter > -1 else float("inf"),
        silhouette=float(s.mean()),
        singleton_classes=singletons,
    )


def evaluate_embeddings(params: ModelParams, dataset, batch_size: int = 64) -> EmbeddingQuality:
    return embedding_quality(embed(params, dataset, batch_size), dataset.labels)

