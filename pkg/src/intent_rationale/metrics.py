"""Plausibility, faithfulness, classification and agreement metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PredictFn = Callable[[Sequence[str]], Sequence[float]]

IOU_THRESHOLD = 0.5


def topk_rationale(attributions: Sequence[float], k: int = 5) -> frozenset[int]:
    """Positions of the ``min(k, m)`` largest scores; earlier position wins ties."""
    scores = np.asarray(attributions, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    # stable sort on the negated scores keeps the earlier index first among equals
    order = np.argsort(-scores, kind="stable")
    return frozenset(int(i) for i in order[:k])


def mask_to_rationale(mask: Sequence[int]) -> frozenset[int]:
    return frozenset(i for i, v in enumerate(mask) if v)


def spans(indices: Iterable[int]) -> list[tuple[int, int]]:
    """Maximal runs of consecutive indices as inclusive ``(start, end)`` pairs."""
    out: list[tuple[int, int]] = []
    for i in sorted(set(indices)):
        if out and i == out[-1][1] + 1:
            out[-1] = (out[-1][0], i)
        else:
            out.append((i, i))
    return out


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _check_range(indices, m):
    if m is not None:
        for i in indices:
            if not 0 <= i < m:
                raise IndexError(f"rationale index {i} outside [0, {m})")


def token_prf(pred, gold, m: int | None = None) -> tuple[float, float, float]:
    pred, gold = set(pred), set(gold)
    _check_range(pred | gold, m)
    if not pred and not gold:
        return 1.0, 1.0, 1.0
    if not pred or not gold:
        return 0.0, 0.0, 0.0
    tp = len(pred & gold)
    p, r = tp / len(pred), tp / len(gold)
    return p, r, _f1(p, r)


def token_f1(pred, gold, m: int | None = None) -> float:
    return token_prf(pred, gold, m)[2]


def mean_token_f1(preds: Sequence, golds: Sequence) -> float:
    if len(preds) != len(golds):
        raise ValueError("prediction and gold counts differ")
    if not preds:
        return 0.0
    return float(np.mean([token_f1(p, g) for p, g in zip(preds, golds)]))


def span_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]) + 1)
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


@dataclass
class SpanCounts:
    hits: int = 0
    predicted: int = 0
    matched_gold: int = 0
    gold: int = 0

    def add(self, pred, gold) -> None:
        pspans, gspans = spans(pred), spans(gold)
        matched = set()
        for ps in pspans:
            ious = [span_iou(ps, gs) for gs in gspans]
            if ious and max(ious) > IOU_THRESHOLD:
                self.hits += 1
                matched.update(g for g, v in enumerate(ious) if v > IOU_THRESHOLD)
        self.predicted += len(pspans)
        self.gold += len(gspans)
        self.matched_gold += len(matched)

    def prf(self) -> tuple[float, float, float]:
        if self.predicted == 0 and self.gold == 0:
            return 1.0, 1.0, 1.0
        if self.predicted == 0 or self.gold == 0:
            return 0.0, 0.0, 0.0
        p, r = self.hits / self.predicted, self.matched_gold / self.gold
        return p, r, _f1(p, r)


def iou_f1(preds, golds) -> float:
    """Micro-averaged span F1 over a corpus.

    ``preds``/``golds`` are sequences of index sets, one per instance; a
    single pair of sets is accepted as a one-instance corpus. A predicted
    span counts as a hit when its IOU with some gold span exceeds 0.5.
    """
    if _is_index_set(preds) and _is_index_set(golds):
        preds, golds = [preds], [golds]
    if len(preds) != len(golds):
        raise ValueError("prediction and gold counts differ")
    counts = SpanCounts()
    for p, g in zip(preds, golds):
        counts.add(p, g)
    return counts.prf()[2]


def _is_index_set(x) -> bool:
    return isinstance(x, (set, frozenset)) or (
        isinstance(x, (list, tuple)) and all(isinstance(v, (int, np.integer)) for v in x)
    )


def _keep(tokens: Sequence[str], positions, keep: bool) -> list[str]:
    positions = set(positions)
    return [t for i, t in enumerate(tokens) if (i in positions) == keep]


def sufficiency(predict_fn: PredictFn, tokens: Sequence[str], rationale, j: int) -> float:
    full = predict_fn(list(tokens))[j]
    only = predict_fn(_keep(tokens, rationale, True))[j]
    return float(full - only)


def comprehensiveness(predict_fn: PredictFn, tokens: Sequence[str], rationale, j: int) -> float:
    full = predict_fn(list(tokens))[j]
    rest = predict_fn(_keep(tokens, rationale, False))[j]
    return float(full - rest)


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


def classification_report(pred: Sequence[str], gold: Sequence[str], labels: Sequence[str]) -> tuple[float, dict]:
    """Accuracy and per-class precision/recall/F1/support (0 for empty denominators)."""
    if len(pred) != len(gold):
        raise ValueError("prediction and gold counts differ")
    known = set(labels)
    for lab in list(pred) + list(gold):
        if lab not in known:
            raise KeyError(f"unknown label {lab!r}")
    n = len(gold)
    accuracy = sum(p == g for p, g in zip(pred, gold)) / n if n else 0.0
    per_class = {}
    for lab in labels:
        tp = sum(p == lab and g == lab for p, g in zip(pred, gold))
        npred = sum(p == lab for p in pred)
        support = sum(g == lab for g in gold)
        prec = tp / npred if npred else 0.0
        rec = tp / support if support else 0.0
        per_class[lab] = ClassScores(prec, rec, _f1(prec, rec), support)
    return accuracy, per_class


@dataclass
class MetricsReport:
    accuracy: float
    token_f1: float
    iou_f1: float
    comprehensiveness: float
    sufficiency: float
    per_class: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "token_f1": self.token_f1,
            "iou_f1": self.iou_f1,
            "comprehensiveness": self.comprehensiveness,
            "sufficiency": self.sufficiency,
            "per_class": {
                lab: {"precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support}
                for lab, s in self.per_class.items()
            },
            "counts": self.counts,
            "config": self.config,
        }


def evaluate(
    predict_fn: PredictFn,
    labels: Sequence[str],
    instances: Sequence[tuple[Sequence[str], str, Sequence[int], Sequence[float]]],
    k: int = 5,
) -> MetricsReport:
    """Full metric suite over ``(tokens, gold_label, gold_mask, attributions)`` tuples.

    The top-``k`` rationale feeds both plausibility and faithfulness; the
    faithfulness class is the one predicted on the full input.
    """
    preds, golds = [], []
    rat_pred, rat_gold = [], []
    suff, comp = [], []
    for tokens, gold_label, gold_mask, attributions in instances:
        if len(attributions) != len(tokens) or len(gold_mask) != len(tokens):
            raise ValueError("attributions, mask and tokens must align")
        probs = np.asarray(predict_fn(list(tokens)))
        j = int(np.argmax(probs))
        preds.append(labels[j])
        golds.append(gold_label)
        rationale = topk_rationale(attributions, k) if len(tokens) else frozenset()
        rat_pred.append(rationale)
        rat_gold.append(mask_to_rationale(gold_mask))
        suff.append(sufficiency(predict_fn, tokens, rationale, j))
        comp.append(comprehensiveness(predict_fn, tokens, rationale, j))
    accuracy, per_class = classification_report(preds, golds, labels)
    return MetricsReport(
        accuracy=accuracy,
        token_f1=mean_token_f1(rat_pred, rat_gold),
        iou_f1=iou_f1(rat_pred, rat_gold),
        comprehensiveness=float(np.mean(comp)) if comp else 0.0,
        sufficiency=float(np.mean(suff)) if suff else 0.0,
        per_class=per_class,
        counts={"instances": len(golds)},
        config={"k": k},
    )


# -- agreement -------------------------------------------------------------


@dataclass
class Agreement:
    kappa: float
    p_bar: float
    p_e: float
    items: int
    raters: int


def agreement_table(ratings: Sequence[Sequence[str]]) -> tuple[np.ndarray, list[str]]:
    """Items x categories count matrix from per-item rater labels."""
    if not ratings:
        raise ValueError("no items")
    n = len(ratings[0])
    for i, row in enumerate(ratings):
        if len(row) != n:
            raise ValueError(f"item {i} has {len(row)} ratings, expected {n}")
    cats = sorted({lab for row in ratings for lab in row})
    col = {c: j for j, c in enumerate(cats)}
    table = np.zeros((len(ratings), len(cats)), dtype=np.int64)
    for i, row in enumerate(ratings):
        for lab in row:
            table[i, col[lab]] += 1
    return table, cats


def fleiss(table) -> Agreement:
    counts = np.asarray(table)
    if counts.ndim != 2 or counts.shape[0] < 1:
        raise ValueError("agreement table must be a nonempty items x categories matrix")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    row_sums = counts.sum(axis=1)
    n = int(row_sums[0])
    if np.any(row_sums != n):
        raise ValueError("every item must have the same number of ratings")
    if n < 2:
        raise ValueError("need at least two raters per item")
    N = counts.shape[0]
    p_item = ((counts**2).sum(axis=1) - n) / (n * (n - 1))
    p_bar = float(p_item.mean())
    p_j = counts.sum(axis=0) / (N * n)
    p_e = float(np.sum(p_j**2))
    if p_bar == 1.0:
        return Agreement(1.0, p_bar, p_e, N, n)
    if p_e == 1.0:
        raise ZeroDivisionError("kappa undefined: expected agreement is 1 but observed agreement is not")
    return Agreement((p_bar - p_e) / (1 - p_e), p_bar, p_e, N, n)


def fleiss_kappa(table) -> float:
    return fleiss(table).kappa
