"""Rep-based, set-based (majority vote) and rep-count-stratified accuracy."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from repforge.dataset import SetRecord, Standardizer
from repforge.imaging import ImageLayout
from repforge.model import LayoutMismatchError, Model, predict_batch
from repforge.training import stage_images

MANY_REPS = 8  # "more than 7 reps"


def majority_vote(rep_predictions, rep_probs) -> int:
    """Most frequent class; ties go to the larger summed probability, then
    to the smaller class index."""
    preds = [int(p) for p in rep_predictions]
    if not preds:
        raise ValueError("majority_vote needs at least one prediction")
    probs = np.asarray(rep_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(preds):
        raise ValueError("rep_probs must hold one probability vector per prediction")
    counts = Counter(preds)
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if len(tied) == 1:
        return tied[0]
    mass = probs[:, tied].sum(axis=0)
    return tied[int(np.argmax(mass))]


def normalize_confusion(confusion) -> np.ndarray:
    m = np.asarray(confusion, dtype=np.float64)
    sums = m.sum(axis=1, keepdims=True)
    return np.divide(m, sums, out=np.zeros_like(m), where=sums != 0)


@dataclass
class EvalReport:
    rep_accuracy: float
    set_accuracy: float
    set_accuracy_gt7: float | None
    confusion: list[list[int]]
    per_rep_count_accuracy: dict[int, float]
    num_reps: int
    num_sets: int
    num_sets_gt7: int

    def to_json(self, path=None) -> str:
        payload = asdict(self)
        payload["per_rep_count_accuracy"] = {str(k): v for k, v in self.per_rep_count_accuracy.items()}
        payload["normalized_confusion"] = normalize_confusion(self.confusion).tolist()
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    def confusion_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in normalize_confusion(self.confusion):
                w.writerow([repr(float(v)) for v in row])


def report_from_predictions(
    sets: list[SetRecord], rep_preds, rep_probs, num_classes: int
) -> EvalReport:
    """Aggregate per-rep predictions (in set/rep order) into an EvalReport."""
    if not sets:
        raise ValueError("no evaluation sets")
    rep_preds = np.asarray(rep_preds, dtype=np.int64)
    rep_probs = np.asarray(rep_probs, dtype=np.float64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    set_hits, many_hits, many_total = 0, 0, 0
    by_count: dict[int, list[int]] = {}
    start = 0
    for s in sets:
        n = len(s.reps)
        preds = rep_preds[start:start + n]
        probs = rep_probs[start:start + n]
        start += n
        for p in preds:
            confusion[s.exercise_id, p] += 1
        hit = majority_vote(preds, probs) == s.exercise_id
        set_hits += hit
        if n >= MANY_REPS:
            many_total += 1
            many_hits += hit
        tally = by_count.setdefault(n, [0, 0])
        tally[0] += int(np.sum(preds == s.exercise_id))
        tally[1] += n
    if start != len(rep_preds):
        raise ValueError(f"{len(rep_preds)} predictions for {start} reps")
    total = int(confusion.sum())
    return EvalReport(
        rep_accuracy=int(np.trace(confusion)) / total,
        set_accuracy=set_hits / len(sets),
        set_accuracy_gt7=(many_hits / many_total) if many_total else None,
        confusion=confusion.tolist(),
        per_rep_count_accuracy={k: c / t for k, (c, t) in sorted(by_count.items())},
        num_reps=total,
        num_sets=len(sets),
        num_sets_gt7=many_total,
    )


def stratum_accuracy(sets: list[SetRecord], rep_preds, lo: int, hi: int | None = None) -> float:
    """Rep accuracy restricted to sets with ``lo <= len(reps) <= hi``."""
    hits = total = 0
    start = 0
    for s in sets:
        n = len(s.reps)
        if n >= lo and (hi is None or n <= hi):
            hits += int(np.sum(np.asarray(rep_preds[start:start + n]) == s.exercise_id))
            total += n
        start += n
    return hits / total if total else float("nan")


def predict_sets(
    model: Model, sets: list[SetRecord], standardizer: Standardizer, max_reps: int = 2048
) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode predictions for every rep, in set/rep order.

    Sets are staged in groups of at most ``max_reps`` reps to bound memory.
    """
    preds, probs = [], []
    group: list[SetRecord] = []
    count = 0
    for s in [*sets, None]:
        if s is None or (group and count + len(s.reps) > max_reps):
            images, _ = stage_images(group, standardizer, model.config)
            p, pr = predict_batch(model, images)
            preds.append(p)
            probs.append(pr)
            group, count = [], 0
        if s is not None:
            group.append(s)
            count += len(s.reps)
    return np.concatenate(preds), np.concatenate(probs)


def evaluate(
    model: Model, sets: list[SetRecord], standardizer: Standardizer, layout: ImageLayout | str | None = None
) -> EvalReport:
    if layout is not None and ImageLayout(layout) is not model.config.layout:
        raise LayoutMismatchError(
            f"model was built for {model.config.layout.value!r}, not {ImageLayout(layout).value!r}"
        )
    if not sets:
        raise ValueError("no evaluation sets")
    bad = [s.exercise_id for s in sets if s.exercise_id >= model.config.num_classes]
    if bad:
        raise ValueError(f"label {max(bad)} outside the model's {model.config.num_classes} classes")
    preds, probs = predict_sets(model, sets, standardizer)
    return report_from_predictions(sets, preds, probs, model.config.num_classes)
