"""Text-embedding classification of point features and segmentation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensorkit import NORM_EPS


@dataclass
class TextEmbeddingTable:
    labels: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.labels = [str(x) for x in self.labels]
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.labels):
            raise ConfigError(f"{len(self.labels)} labels but embeddings have shape {self.embeddings.shape}")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("labels must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ConfigError("embedding rows must be unit norm")

    @classmethod
    def from_prototypes(cls, prototypes, labels=None) -> "TextEmbeddingTable":
        protos = np.asarray(prototypes, dtype=np.float64)
        protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        labels = labels or [f"class_{i}" for i in range(protos.shape[0])]
        return cls(labels, protos)

    def to_json(self) -> str:
        return json.dumps({"labels": self.labels, "embeddings": self.embeddings.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "TextEmbeddingTable":
        d = json.loads(text)
        return cls(d["labels"], d["embeddings"])


def classify(features, table: TextEmbeddingTable) -> np.ndarray:
    """Label of the most cosine-similar table row per point (ties -> lowest index)."""
    if len(table.labels) == 0:
        raise ConfigError("text embedding table is empty")
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != table.embeddings.shape[1]:
        raise DimensionError(f"features {f.shape} do not match embedding width {table.embeddings.shape[1]}")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    unit = np.divide(f, norms, out=np.zeros_like(f), where=norms > NORM_EPS)
    return np.argmax(unit @ table.embeddings.T, axis=1)


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ")
    for name, lab in (("pred", pred), ("gt", gt)):
        if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
            raise ConfigError(f"{name} labels must lie in [0, {n_classes})")
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def metrics(pred, gt, n_classes: int) -> dict:
    """mIoU / mAcc over the classes present in ``gt``."""
    conf = confusion_matrix(pred, gt, n_classes)
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    present = gt_count > 0
    if not present.any():
        raise ConfigError("no ground-truth class is present; metrics are undefined")
    union = gt_count + pred_count - tp
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    acc = np.divide(tp, gt_count, out=np.zeros_like(tp), where=gt_count > 0)
    return {
        "mIoU": float(iou[present].mean()),
        "mAcc": float(acc[present].mean()),
        "per_class_iou": [float(x) if p else None for x, p in zip(iou, present)],
        "per_class_acc": [float(x) if p else None for x, p in zip(acc, present)],
        "confusion": conf.tolist(),
    }
