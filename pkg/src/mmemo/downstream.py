"""Downstream adaptation: finetune classifier, prompt-based prediction,
WA/UAR metrics and the speaker-independent cross-validation harness."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .labels import N_CLASSES, EmotionClass
from .model import EmotionModel
from .tasks import gather_positions, mlm_logits

__all__ = [
    "EmotionClass", "MetricsReport", "compute_metrics", "finetune_forward", "finetune_loss",
    "prompt_logits", "prompt_predict", "prompt_loss", "cross_validate", "FoldResult",
]


# ---------------------------------------------------------------- finetune path

def pooled(model: EmotionModel, encoded: Node, batch, pooling: str = "cls") -> Node:
    bsz, length, h = encoded.shape
    if pooling == "cls":
        return gather_positions(encoded, np.arange(bsz) * length)
    weights = batch.attention_mask / batch.attention_mask.sum(axis=1, keepdims=True)
    return ad.reshape(ad.matmul(ad.constant(weights[:, None, :]), encoded), (bsz, h))


def finetune_forward(model: EmotionModel, samples, pooling: str = "cls") -> Node:
    """Classifier logits ``[B, 4]`` from the pooled backbone output."""
    batch = model.pack(samples)
    enc = model.encode(batch)
    p = model.params
    return ad.linear(pooled(model, enc, batch, pooling), p["classifier.w"], p["classifier.b"])


def finetune_loss(model: EmotionModel, samples, pooling: str = "cls") -> Node:
    logits = finetune_forward(model, samples, pooling)
    return ad.cross_entropy(logits, [int(s.label) for s in samples])


def finetune_predict(model: EmotionModel, samples, pooling: str = "cls") -> list[EmotionClass]:
    logits = finetune_forward(model, samples, pooling).value
    return [EmotionClass(int(i)) for i in logits.argmax(axis=1)]


# ---------------------------------------------------------------- prompt path

def prompt_logits(model: EmotionModel, samples) -> Node:
    """Full-vocabulary MLM logits at the prompt mask slot, ``[B, V]``."""
    batch = model.pack(samples, prompt=True)
    enc = model.encode(batch)
    idx = np.arange(batch.batch_size) * batch.length + batch.prompt_positions
    return mlm_logits(model.params, gather_positions(enc, idx), model.cfg.ln_eps)


def restrict_to_verbalizer(logits: np.ndarray, verbalizer_ids: Sequence[int]) -> list[EmotionClass]:
    sub = np.asarray(logits)[..., list(verbalizer_ids)]
    return [EmotionClass(int(i)) for i in np.atleast_2d(sub).argmax(axis=1)]


def prompt_predict(model: EmotionModel, samples) -> list[EmotionClass]:
    logits = prompt_logits(model, samples).value
    return restrict_to_verbalizer(logits, model.vocab.verbalizer_ids())


def prompt_loss(model: EmotionModel, samples) -> Node:
    targets = [model.vocab.verbalizer(s.label) for s in samples]
    return ad.cross_entropy(prompt_logits(model, samples), targets)


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows: true class, columns: predicted class
    wa: float
    uar: float
    n: int

    def to_dict(self) -> dict:
        return {"wa": self.wa, "uar": self.uar, "n": self.n,
                "confusion": self.confusion.astype(int).tolist()}


def confusion_matrix(preds, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    n = int(cm.sum())
    if n == 0:
        raise ValueError("metrics need at least one sample")
    support = cm.sum(axis=1)
    present = support > 0
    recalls = np.diag(cm)[present] / support[present]
    return MetricsReport(cm, float(np.trace(cm) / n), float(recalls.mean()), n)


def compute_metrics(preds, labels) -> MetricsReport:
    """WA is overall accuracy; UAR averages recall over classes present in ``labels``."""
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    if not labels:
        raise ValueError("metrics need at least one sample")
    return metrics_from_confusion(confusion_matrix([int(p) for p in preds], [int(y) for y in labels]))


# ---------------------------------------------------------------- cross-validation

@dataclass
class FoldResult:
    fold: int
    test_groups: list
    n_train: int
    metrics: MetricsReport


@dataclass
class CVResult:
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def mean_wa(self) -> float:
        return float(np.mean([f.metrics.wa for f in self.folds]))

    @property
    def mean_uar(self) -> float:
        return float(np.mean([f.metrics.uar for f in self.folds]))

    def records(self, config_hash: str = "", **extra) -> list[dict]:
        return [
            {"fold": f.fold, "test_groups": f.test_groups, "n_train": f.n_train,
             "config_hash": config_hash, **f.metrics.to_dict(), **extra}
            for f in self.folds
        ]

    def report(self, title: str = "") -> str:
        lines = [title] if title else []
        for f in self.folds:
            lines.append(f"fold {f.fold:2d}  groups={f.test_groups}  n_train={f.n_train:4d}  "
                         f"WA={f.metrics.wa:.4f}  UAR={f.metrics.uar:.4f}")
        lines.append(f"mean     WA={self.mean_wa:.4f}  UAR={self.mean_uar:.4f}")
        return "\n".join(lines)


def fold_assignment(groups: Sequence, folds: int, seed: int) -> dict:
    """Map each distinct group id to a fold index, shuffled by ``seed``."""
    distinct = sorted(set(groups))
    if len(distinct) < folds:
        raise ValueError(f"{len(distinct)} groups cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(distinct))
    return {distinct[j]: i % folds for i, j in enumerate(order)}


def subsample(indices: Sequence[int], fraction: float, rng: np.random.Generator) -> list[int]:
    indices = list(indices)
    if fraction >= 1.0:
        return indices
    k = max(1, int(round(fraction * len(indices))))
    chosen = rng.choice(len(indices), size=k, replace=False)
    return [indices[i] for i in sorted(chosen)]


def cross_validate(
    samples,
    train_fn: Callable[[list, int], object],
    predict_fn: Callable[[object, list], list],
    folds: int,
    seed: int = 0,
    fraction: float = 1.0,
    group_fn: Callable = lambda s: s.speaker,
) -> CVResult:
    """Leave-group-out evaluation.

    ``train_fn(train_samples, fold)`` returns a trained model handle and
    ``predict_fn(handle, test_samples)`` returns predicted classes.
    """
    groups = [group_fn(s) for s in samples]
    assign = fold_assignment(groups, folds, seed)
    rng = np.random.default_rng([seed, 7919])
    result = CVResult()
    for fold in range(folds):
        test_idx = [i for i, g in enumerate(groups) if assign[g] == fold]
        train_idx = subsample([i for i, g in enumerate(groups) if assign[g] != fold], fraction, rng)
        handle = train_fn([samples[i] for i in train_idx], fold)
        test = [samples[i] for i in test_idx]
        preds = predict_fn(handle, test)
        metrics = compute_metrics(preds, [s.label for s in test])
        result.folds.append(FoldResult(fold, sorted({groups[i] for i in test_idx}), len(train_idx), metrics))
    return result


def write_records(records: list[dict], path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
