"""Scoring: top-1 accuracy, normalized improvement, per-type breakdowns,
rank-sum test and Cliff's delta."""
from __future__ import annotations

import bisect
import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError

TASKS = ("type", "value")
DIFFICULT_TYPES = (
    "ContinueStatement",
    "ForStatement",
    "WhileStatement",
    "ReturnStatement",
    "SwitchStatement",
    "ThrowStatement",
    "TryStatement",
    "IfStatement",
)
EXACT_LIMIT = 12


def top1_accuracy(predictions, targets, unk_id: Optional[int], task: str = "type",
                  pad_id: Optional[int] = None) -> float:
    """Fraction of queries whose argmax equals the target.

    For the value task a target equal to ``unk_id`` is always wrong, UNK
    prediction or not. Targets equal to ``pad_id`` are not scored. Returns
    NaN when nothing is scored.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    pred = np.asarray(predictions)
    tgt = np.asarray(targets)
    if pred.shape != tgt.shape:
        raise ShapeError(f"predictions {pred.shape} and targets {tgt.shape} differ")
    keep = np.ones(tgt.shape, bool) if pad_id is None else tgt != pad_id
    correct = (pred == tgt) & keep
    if task == "value" and unk_id is not None:
        correct &= tgt != unk_id
    total = int(keep.sum())
    return float(correct.sum()) / total if total else float("nan")


def normalized_improvement(acc_x: float, acc_y: float, acc_ub: float = 1.0) -> float:
    """Improvement of model x over model y relative to the room left below ``acc_ub``.

    Gains are scaled by ``acc_ub - acc_y``; losses by ``acc_y``.
    """
    for name, v in (("acc_x", acc_x), ("acc_y", acc_y), ("acc_ub", acc_ub)):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"{name}={v} outside [0, 1]")
    if acc_ub < max(acc_x, acc_y):
        raise DomainError(f"upper bound {acc_ub} below an observed accuracy ({acc_x}, {acc_y})")
    if acc_x > acc_y:
        return (acc_x - acc_y) / (acc_ub - acc_y)
    if acc_x == acc_y:
        return 0.0
    return (acc_x - acc_y) / acc_y


def per_type_accuracy(predictions: Sequence[str], targets: Sequence[str],
                      type_set: Optional[Iterable[str]] = DIFFICULT_TYPES,
                      known_types: Optional[Iterable[str]] = None) -> dict[str, dict]:
    """Accuracy of type predictions grouped by target type.

    ``type_set=None`` reports every type present. Types of ``type_set`` that
    never occur as targets are left out rather than reported as 0. Names
    outside ``known_types`` (when given) raise KeyError.
    """
    if len(predictions) != len(targets):
        raise ShapeError(f"{len(predictions)} predictions for {len(targets)} targets")
    wanted = None
    if type_set is not None:
        wanted = list(dict.fromkeys(type_set))
        if not wanted:
            raise ValueError("type_set must be nonempty")
        if known_types is not None:
            known = set(known_types)
            unknown = [t for t in wanted if t not in known]
            if unknown:
                raise KeyError(f"unknown type names {unknown}; valid names: {sorted(known)}")
    counts: Counter = Counter()
    hits: Counter = Counter()
    for p, t in zip(predictions, targets):
        if wanted is not None and t not in wanted:
            continue
        counts[t] += 1
        hits[t] += p == t
    order = wanted if wanted is not None else sorted(counts)
    return {t: {"accuracy": hits[t] / counts[t], "count": counts[t]} for t in order if counts[t]}


def cliffs_delta(sample_x: Sequence[float], sample_y: Sequence[float]) -> float:
    """P(x > y) - P(x < y) over all cross pairs, via sorting."""
    if len(sample_x) == 0 or len(sample_y) == 0:
        raise DomainError("Cliff's delta needs two nonempty samples")
    ys = sorted(sample_y)
    more = less = 0
    for x in sample_x:
        less += len(ys) - bisect.bisect_right(ys, x)
        more += bisect.bisect_left(ys, x)
    return (more - less) / (len(sample_x) * len(ys))


def cliffs_magnitude(delta: float) -> str:
    """Romano et al. thresholds: 0.147 / 0.33 / 0.474."""
    d = abs(delta)
    if d < 0.147:
        return "negligible"
    if d < 0.33:
        return "small"
    if d < 0.474:
        return "medium"
    return "large"


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v), dtype=float)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_rank_sum_pvalue(ranks: np.ndarray, n1: int, observed: float) -> float:
    """Two-sided permutation p-value of the rank sum of ``n1`` of ``ranks``.

    Counts subsets by their (doubled, hence integral) rank sum with a DP
    over elements rather than listing subsets.
    """
    doubled = [int(round(2 * r)) for r in ranks]
    total = sum(doubled)
    # counts[k][s] = number of k-subsets with doubled sum s
    counts = [Counter() for _ in range(n1 + 1)]
    counts[0][0] = 1
    for r in doubled:
        for k in range(n1, 0, -1):
            prev = counts[k - 1]
            cur = counts[k]
            for s, c in prev.items():
                cur[s + r] += c
    dist = counts[n1]
    n = len(doubled)
    # |s/n1 - mean| compared in integers: |s*n - n1*total|
    dev = abs(int(round(2 * observed)) * n - n1 * total)
    extreme = sum(c for s, c in dist.items() if abs(s * n - n1 * total) >= dev)
    return extreme / sum(dist.values())


def wilcoxon_rank_sum(sample_x: Sequence[float], sample_y: Sequence[float]) -> tuple[float, float]:
    """Rank-sum statistic of ``sample_x`` and its two-sided p-value.

    Exact permutation distribution when the pooled size is at most 12,
    otherwise the normal approximation with tie-corrected variance (no
    continuity correction).
    """
    n1, n2 = len(sample_x), len(sample_y)
    if n1 == 0 or n2 == 0:
        raise DomainError("rank-sum test needs two nonempty samples")
    pooled = list(sample_x) + list(sample_y)
    ranks = midranks(pooled)
    w = float(ranks[:n1].sum())
    n = n1 + n2
    if n <= EXACT_LIMIT:
        return w, _exact_rank_sum_pvalue(ranks, n1, w)
    mean = n1 * (n + 1) / 2.0
    _, tie_counts = np.unique(np.asarray(pooled, dtype=float), return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum()) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return w, 1.0
    z = (w - mean) / math.sqrt(var)
    return w, min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


@dataclass
class EvalReport:
    accuracy_type: Optional[float]
    accuracy_value: Optional[float]
    unk_rate: float
    queries: int
    normalized_improvements: list[dict] = field(default_factory=list)
    per_type_accuracy: dict = field(default_factory=dict)
    difficult_types: Optional[dict] = None
    significance: Optional[dict] = None
    loss: dict = field(default_factory=dict)
    fingerprint: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)

    def per_type_csv(self, rows: Optional[Mapping[str, dict]] = None) -> str:
        """Per-type rows as CSV: type, count, accuracy."""
        if rows is None:
            rows = self.difficult_types if self.difficult_types is not None else self.per_type_accuracy
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["type", "count", "accuracy"])
        for t, r in rows.items():
            writer.writerow([t, r["count"], f"{r['accuracy']:.4f}"])
        return buf.getvalue()


@dataclass
class Baseline:
    name: str
    task: str
    accuracy: float
    upper_bound: float = 1.0


def improvements_over(baselines: Iterable[Baseline], accuracy_type: Optional[float],
                      accuracy_value: Optional[float]) -> list[dict]:
    ours = {"type": accuracy_type, "value": accuracy_value}
    out = []
    for b in baselines:
        if b.task not in ours:
            raise ValueError(f"baseline task must be one of {TASKS}, got {b.task!r}")
        acc = ours[b.task]
        if acc is None:
            continue
        out.append({
            "vs": b.name,
            "task": b.task,
            "baseline_accuracy": b.accuracy,
            "upper_bound": b.upper_bound,
            "value": normalized_improvement(acc, b.accuracy, b.upper_bound),
        })
    return out


def significance(sample_x: Sequence[float], sample_y: Sequence[float]) -> dict:
    """Rank-sum test and Cliff's delta between two per-program accuracy samples."""
    x = [v for v in sample_x if not math.isnan(v)]
    y = [v for v in sample_y if not math.isnan(v)]
    stat, p = wilcoxon_rank_sum(x, y)
    delta = cliffs_delta(x, y)
    return {
        "n_x": len(x),
        "n_y": len(y),
        "rank_sum": stat,
        "wilcoxon_p": p,
        "cliffs_delta": delta,
        "effect": cliffs_magnitude(delta),
    }


def build_report(predictions: Mapping[str, np.ndarray], targets: Mapping[str, np.ndarray],
                 type_tokens: Sequence[str], unk_id: int, *, baselines: Iterable[Baseline] = (),
                 difficult: bool = False, types: Optional[Sequence[str]] = None,
                 compare: Optional[tuple[Sequence[float], Sequence[float]]] = None,
                 loss: Optional[dict] = None, fingerprint: Optional[dict] = None) -> EvalReport:
    """Assemble an :class:`EvalReport` from flat id arrays.

    ``predictions`` holds only the tasks the model was trained for;
    ``targets`` holds both. ``compare`` is a pair of per-program accuracy
    samples for the significance block.
    """
    acc = {t: top1_accuracy(predictions[t], targets[t], unk_id, t) if t in predictions else None
           for t in TASKS}
    value_targets = np.asarray(targets["value"])
    unk = float((value_targets == unk_id).mean()) if value_targets.size else 0.0
    report = EvalReport(acc["type"], acc["value"], unk, int(np.asarray(targets["type"]).size),
                        loss=dict(loss or {}), fingerprint=dict(fingerprint or {}))
    report.normalized_improvements = improvements_over(baselines, acc["type"], acc["value"])
    if "type" in predictions:
        pred_names = [type_tokens[i] for i in np.asarray(predictions["type"])]
        tgt_names = [type_tokens[i] for i in np.asarray(targets["type"])]
        report.per_type_accuracy = per_type_accuracy(
            pred_names, tgt_names, types, known_types=type_tokens if types is not None else None)
        if difficult:
            report.difficult_types = per_type_accuracy(pred_names, tgt_names, DIFFICULT_TYPES)
    if compare is not None:
        report.significance = significance(*compare)
    return report
