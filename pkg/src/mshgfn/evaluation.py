"""ACC / MCC over pooled (stock, day) predictions, and result tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import stack_batch


@dataclass(frozen=True)
class Metrics:
    acc: float
    mcc: float
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds).reshape(-1).astype(np.int64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if preds.size == 0:
        raise ValueError("cannot score an empty prediction set")
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions vs {labels.size} labels")
    return preds, labels


def confusion(preds, labels) -> tuple[int, int, int, int]:
    """``(TP, TN, FP, FN)`` with class 1 as positive."""
    p, y = _pair(preds, labels)
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, tn, fp, fn


def mcc_from_counts(tp: int, tn: int, fp: int, fn: int) -> float:
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    # integer numerator keeps large counts exact
    return (tp * tn - fp * fn) / math.sqrt(denom)


def accuracy(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(p == y))


def mcc(preds, labels) -> float:
    return mcc_from_counts(*confusion(preds, labels))


def metrics(preds, labels) -> Metrics:
    tp, tn, fp, fn = confusion(preds, labels)
    return Metrics((tp + tn) / (tp + tn + fp + fn), mcc_from_counts(tp, tn, fp, fn), tp, tn, fp, fn)


def predict_samples(model, samples, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probability of "up", shape ``(n_samples, N)``."""
    out = []
    for lo in range(0, len(samples), batch_size):
        x, _ = stack_batch(samples[lo : lo + batch_size])
        out.append(model.predict_proba(x))
    return np.concatenate(out, axis=0)


def evaluate(model, samples, batch_size: int = 64, per_day_csv=None) -> Metrics:
    """Micro-pooled metrics over every stock and day of ``samples`` (dropout off)."""
    prob = predict_samples(model, samples, batch_size)
    labels = np.stack([s.labels for s in samples])
    preds = (prob >= 0.5).astype(np.int64)
    if per_day_csv is not None:
        write_per_day(per_day_csv, samples, preds, labels)
    return metrics(preds, labels)


def write_per_day(path, samples, preds, labels) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "acc", "mcc", "tp", "tn", "fp", "fn"])
        for s, p, y in zip(samples, preds, labels):
            m = metrics(p, y)
            w.writerow([s.anchor_date.isoformat(), f"{m.acc:.12g}", f"{m.mcc:.12g}", m.tp, m.tn, m.fp, m.fn])


def write_predictions(path, samples, prob, tickers) -> None:
    """One row per (date, ticker); the date is the window's anchor day, when the decision is made."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "prob_up", "label_pred", "label_true"])
        for s, row in zip(samples, prob):
            for ticker, pr, y in zip(tickers, row, s.labels):
                w.writerow([s.anchor_date.isoformat(), ticker, f"{pr:.12g}", int(pr >= 0.5), int(y)])


def write_results_table(path, rows) -> None:
    """Rows of ``dataset, variant, acc, mcc``; extra keys become extra columns."""
    rows = list(rows)
    cols = ["dataset", "variant", "acc", "mcc"]
    for r in rows:
        cols += [k for k in r if k not in cols]
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in r.items()})
