"""Supervised fine-tuning and classification metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import nn
from .augment import derive_seed
from .autodiff import Tape, Tensor
from .contrastive import _batches
from .data import Dataset
from .errors import ConfigError, ContractError, MetricError, NumericError, TrainingError

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auroc", "auprc")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    train_encoder: bool = True
    label_ratio: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("fine-tuning needs epochs >= 1, batch_size >= 1, lr > 0")
        if not 0.0 < self.label_ratio <= 1.0:
            raise ConfigError("label_ratio outside (0, 1]")


@dataclass
class FinetuneResult:
    encoder: nn.ParameterSet
    classifier: nn.ParameterSet
    f1_history: list  # validation macro-F1 after each epoch
    loss_history: list
    best_epoch: int
    seconds: float


# --- losses / prediction ---------------------------------------------------

def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class (log-sum-exp form)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    picked = logits[np.arange(n), labels]
    return ad.reduce_mean(ad.logsumexp(logits, axis=-1) - picked)


def init_classifier(model_dim: int, n_classes: int, seed: int, hidden_dim: Optional[int] = None) -> nn.ParameterSet:
    return nn.init_mlp_head(model_dim, hidden_dim or model_dim, n_classes, seed, prefix="classifier")


def logits_for(x: np.ndarray, encoder, classifier, arch: nn.ArchConfig) -> Tensor:
    return nn.mlp_head(nn.pooled_embedding(x, encoder, arch), classifier, "classifier")


def predict(encoder, classifier, samples, arch: nn.ArchConfig = nn.ArchConfig(), chunk: int = 256) -> tuple:
    """Class ids (argmax, lowest index on ties) and softmax probability rows."""
    x = samples.values if isinstance(samples, Dataset) else np.asarray(samples, dtype=np.float64)
    probs = []
    with ad.no_grad():
        for i in range(0, len(x), chunk):
            probs.append(ad.softmax(logits_for(x[i:i + chunk], encoder, classifier, arch), axis=-1).data)
    p = np.concatenate(probs) if probs else np.zeros((0, 0))
    return p.argmax(axis=1), p


# --- metrics ---------------------------------------------------------------

def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b != 0)


def confusion(y_true, y_pred, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


def macro_prf(y_true, y_pred, k: int) -> tuple:
    """Macro precision, recall, F1 with 0/0 taken as 0 per class."""
    m = confusion(y_true, y_pred, k)
    tp = np.diag(m).astype(np.float64)
    precision = _safe_div(tp, m.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, m.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return float(precision.mean()), float(recall.mean()), float(f1.mean())


def macro_f1(y_true, y_pred, k: int) -> float:
    return macro_prf(y_true, y_pred, k)[2]


def _ovr_classes(labels: np.ndarray, k: int) -> list:
    return [c for c in range(k) if 0 < np.sum(labels == c) < labels.size]


def auroc_ovr(scores, labels, k: int) -> float:
    """Macro one-vs-rest AUROC (Mann-Whitney, ties count one half)."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    classes = _ovr_classes(labels, k)
    if not classes:
        raise MetricError("no class has both positive and negative samples")
    out = []
    for c in classes:
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        ranks = rankdata(scores[:, c])
        out.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return float(np.mean(out))


def average_precision(score: np.ndarray, positive: np.ndarray) -> float:
    order = np.lexsort((np.arange(score.size), -score))
    hits = positive[order]
    precision_at = np.cumsum(hits) / np.arange(1, score.size + 1)
    return float(precision_at[hits].sum() / hits.sum())


def auprc_ovr(scores, labels, k: int) -> float:
    """Macro one-vs-rest average precision; ties broken by sample index."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    classes = _ovr_classes(labels, k)
    if not classes:
        raise MetricError("no class has both positive and negative samples")
    return float(np.mean([average_precision(scores[:, c], labels == c) for c in classes]))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float
    auprc: float
    std: Optional[dict] = None
    per_seed: Optional[list] = None

    def means(self) -> dict:
        return {m: getattr(self, m) for m in METRIC_NAMES}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def compute_metrics(y_true, y_pred, probs, k: int) -> MetricsReport:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    probs = np.asarray(probs, dtype=np.float64)
    if k < 2:
        raise MetricError("need at least 2 classes")
    if not (y_true.shape == y_pred.shape and probs.shape == (y_true.size, k)):
        raise ContractError(
            f"misaligned inputs: {y_true.shape} labels, {y_pred.shape} predictions, {probs.shape} scores")
    precision, recall, f1 = macro_prf(y_true, y_pred, k)
    return MetricsReport(
        accuracy=float(np.mean(y_true == y_pred)),
        precision=precision,
        recall=recall,
        f1=f1,
        auroc=auroc_ovr(probs, y_true, k),
        auprc=auprc_ovr(probs, y_true, k),
    )


def aggregate_seeds(reports: Sequence[MetricsReport], ddof: int = 0) -> MetricsReport:
    """Mean and (population by default) standard deviation of each metric."""
    if not reports:
        raise ContractError("no reports to aggregate")
    table = np.array([[getattr(r, m) for m in METRIC_NAMES] for r in reports])
    # shift by the column minimum so identical inputs return their value exactly
    base = table.min(axis=0)
    mean = base + (table - base).mean(axis=0)
    std = (table - base).std(axis=0, ddof=ddof) if len(reports) > ddof else np.zeros(len(METRIC_NAMES))
    return MetricsReport(
        *map(float, mean),
        std=dict(zip(METRIC_NAMES, map(float, std))),
        per_seed=[r.means() for r in reports],
    )


# --- fine-tuning -----------------------------------------------------------

def finetune(
    encoder: nn.ParameterSet,
    labeled: Dataset,
    valid: Dataset,
    config: FinetuneConfig,
    seed: int,
    arch: nn.ArchConfig = nn.ArchConfig(),
) -> FinetuneResult:
    """Train encoder + 2-layer classifier with cross-entropy.

    After every epoch the validation macro-F1 is recorded; the returned
    weights are those of the epoch with the highest validation F1 (first
    such epoch on ties). With ``train_encoder=False`` the encoder is frozen
    and returned unchanged.
    """
    start = time.perf_counter()
    y = labeled.require_labels()
    if len(labeled) == 0:
        raise ContractError("empty labeled set")
    k = labeled.n_classes
    enc = encoder.copy(requires_grad=config.train_encoder)
    clf = init_classifier(arch.model_dim, k, derive_seed(seed, 5))
    trainable = enc.merged(clf) if config.train_encoder else clf
    state = nn.OptimizerState(lr=config.lr)
    rng = np.random.default_rng(derive_seed(seed, 6))
    best = (-1.0, enc.copy(), clf.copy(), 0)
    f1_hist, loss_hist = [], []
    x_all = labeled.values
    for epoch in range(config.epochs):
        losses, sizes = [], []
        for b, idx in enumerate(_batches(len(labeled), config.batch_size, rng)):
            trainable.zero_grad()
            try:
                with Tape() as tape:
                    loss = cross_entropy_loss(logits_for(x_all[idx], enc, clf, arch), y[idx])
                tape.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"non-finite fine-tuning loss: {exc}", epoch, b) from exc
            nn.adam_step(trainable, state)
            losses.append(loss.item())
            sizes.append(len(idx))
        loss_hist.append(float(np.average(losses, weights=sizes)))
        pred, _ = predict(enc, clf, valid, arch)
        f1 = macro_f1(valid.require_labels(), pred, k)
        f1_hist.append(f1)
        if f1 > best[0]:
            best = (f1, enc.copy(), clf.copy(), epoch)
        log.debug("finetune epoch %d loss %.4f valid f1 %.4f", epoch, loss_hist[-1], f1)
    _, best_enc, best_clf, best_epoch = best
    if not config.train_encoder:
        best_enc = encoder.copy()
    return FinetuneResult(best_enc, best_clf, f1_hist, loss_hist, best_epoch, time.perf_counter() - start)


def evaluate(encoder, classifier, test: Dataset, arch: nn.ArchConfig = nn.ArchConfig()) -> MetricsReport:
    pred, probs = predict(encoder, classifier, test, arch)
    return compute_metrics(test.require_labels(), pred, probs, test.n_classes)
