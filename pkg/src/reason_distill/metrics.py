"""Accuracy, macro-F1 and support-weighted F1 over the three relevance labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

LABELS = (0, 1, 2)


def _check(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    yt = np.asarray(y_true, dtype=np.int64).reshape(-1)
    yp = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if yt.size != yp.size:
        raise ValueError(f"length mismatch: {yt.size} true vs {yp.size} predicted")
    if yt.size == 0:
        raise ValueError("empty label vectors")
    for arr in (yt, yp):
        if arr.min() < 0 or arr.max() > 2:
            raise ValueError("labels must be 0, 1 or 2")
    return yt, yp


def confusion_matrix(y_true, y_pred) -> np.ndarray:
    """``cm[t, p]`` counts examples with true label t predicted as p."""
    yt, yp = _check(y_true, y_pred)
    return np.bincount(yt * 3 + yp, minlength=9).reshape(3, 3)


def per_label_scores(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(precision, recall, f1, support); 0 wherever a denominator vanishes."""
    tp = np.diag(cm).astype(float)
    pred = cm.sum(axis=0).astype(float)
    support = cm.sum(axis=1)
    prec = np.divide(tp, pred, out=np.zeros(3), where=pred > 0)
    rec = np.divide(tp, support, out=np.zeros(3), where=support > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(3), where=denom > 0)
    return prec, rec, f1, support


def accuracy(y_true, y_pred) -> float:
    yt, yp = _check(y_true, y_pred)
    return float(np.mean(yt == yp))


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean over all three labels (absent labels contribute 0)."""
    return float(np.mean(per_label_scores(confusion_matrix(y_true, y_pred))[2]))


def weighted_f1(y_true, y_pred) -> float:
    _, _, f1, support = per_label_scores(confusion_matrix(y_true, y_pred))
    return float(np.dot(support / support.sum(), f1))


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]
    n: int

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "EvalReport":
        return cls.from_confusion(confusion_matrix(y_true, y_pred))

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "EvalReport":
        cm = np.asarray(cm, dtype=np.int64)
        n = int(cm.sum())
        if n == 0:
            raise ValueError("empty confusion matrix")
        p, r, f1, support = per_label_scores(cm)
        return cls(
            accuracy=float(np.trace(cm) / n),
            macro_f1=float(f1.mean()),
            weighted_f1=float(np.dot(support / n, f1)),
            precision=p.tolist(),
            recall=r.tolist(),
            f1=f1.tolist(),
            support=support.tolist(),
            confusion=cm.tolist(),
            n=n,
        )

    def to_flat(self) -> dict:
        row = {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "weighted_f1": self.weighted_f1}
        for i in LABELS:
            row[f"precision_{i}"] = self.precision[i]
            row[f"recall_{i}"] = self.recall[i]
            row[f"f1_{i}"] = self.f1[i]
            row[f"support_{i}"] = self.support[i]
        row["n"] = self.n
        return row

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_header(self) -> str:
        return ",".join(self.to_flat())

    def csv_row(self) -> str:
        return ",".join(_fmt(v) for v in self.to_flat().values())


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def evaluate(
    predict: Callable[[Sequence], np.ndarray],
    dataset: Sequence,
    batch_size: int = 512,
) -> EvalReport:
    """Score ``predict`` (a batch of examples -> label array) on ``dataset``.

    Shards are merged by adding confusion matrices.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    cm = np.zeros((3, 3), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        preds = np.asarray(predict(chunk))
        cm += confusion_matrix([e.label for e in chunk], preds)
    return EvalReport.from_confusion(cm)
