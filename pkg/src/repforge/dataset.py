"""Rep/set records, the JSON-lines dataset format, length normalization,
standardization and set-disjoint splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

NUM_FEATURES = 9
TARGET_LEN = 784
FEATURE_NAMES = (
    "acc_local_x", "acc_local_y", "acc_local_z",
    "acc_world_x", "acc_world_y", "acc_world_z",
    "euler_x", "euler_y", "euler_z",
)
STD_FLOOR = 1e-8


class DatasetFormatError(ValueError):
    pass


@dataclass(eq=False)
class RepRecord:
    samples: np.ndarray  # (T, 9), rows are time steps at 200 Hz

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] != NUM_FEATURES:
            cols = self.samples.shape[-1] if self.samples.ndim else 0
            raise DatasetFormatError(f"expected {NUM_FEATURES} features per sample, got {cols}")
        if self.samples.shape[0] < 1:
            raise DatasetFormatError("empty rep")
        if not np.all(np.isfinite(self.samples)):
            raise DatasetFormatError("non-finite sample value")

    @property
    def length(self) -> int:
        return self.samples.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RepRecord):
            return NotImplemented
        return np.array_equal(self.samples, other.samples)


@dataclass(eq=False)
class SetRecord:
    set_id: str
    exercise_id: int
    reps: list[RepRecord] = field(default_factory=list)

    def __post_init__(self):
        if not self.reps:
            raise DatasetFormatError(f"set {self.set_id!r} has no reps")

    def __eq__(self, other):
        if not isinstance(other, SetRecord):
            return NotImplemented
        return (
            self.set_id == other.set_id
            and self.exercise_id == other.exercise_id
            and len(self.reps) == len(other.reps)
            and all(a == b for a, b in zip(self.reps, other.reps))
        )


# --------------------------------------------------------------------------
# JSON lines


def _parse_set(obj) -> SetRecord:
    if not isinstance(obj, dict):
        raise DatasetFormatError("line is not a JSON object")
    for key in ("set_id", "exercise_id", "reps"):
        if key not in obj:
            raise DatasetFormatError(f"missing field {key!r}")
    label = obj["exercise_id"]
    if not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise DatasetFormatError(f"exercise_id must be a non-negative integer, got {label!r}")
    if not isinstance(obj["reps"], list):
        raise DatasetFormatError("reps must be a list")
    reps = []
    for k, rep in enumerate(obj["reps"]):
        samples = rep.get("samples") if isinstance(rep, dict) else None
        if not isinstance(samples, list) or not samples:
            raise DatasetFormatError(f"rep {k}: empty rep")
        for row in samples:
            if not isinstance(row, list) or len(row) != NUM_FEATURES:
                got = len(row) if isinstance(row, list) else type(row).__name__
                raise DatasetFormatError(f"rep {k}: expected {NUM_FEATURES} features, got {got}")
        try:
            reps.append(RepRecord(np.array(samples, dtype=np.float64)))
        except (TypeError, ValueError) as exc:
            raise DatasetFormatError(f"rep {k}: {exc}") from None
    return SetRecord(str(obj["set_id"]), label, reps)


def ingest(path) -> list[SetRecord]:
    sets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sets.append(_parse_set(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except DatasetFormatError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from None
    return sets


def export(sets: list[SetRecord], path, num_classes: int | None = None) -> None:
    """Write one set per line. Floats use the shortest exact repr, so
    ``ingest(export(x)) == x`` sample for sample."""
    for s in sets:
        if s.exercise_id < 0 or (num_classes is not None and s.exercise_id >= num_classes):
            raise DatasetFormatError(
                f"set {s.set_id!r}: exercise_id {s.exercise_id} outside 0..{(num_classes or 0) - 1}"
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sets:
            record = {
                "set_id": s.set_id,
                "exercise_id": int(s.exercise_id),
                "reps": [{"samples": r.samples.tolist()} for r in s.reps],
            }
            fh.write(json.dumps(record, separators=(",", ":"), allow_nan=False))
            fh.write("\n")


# --------------------------------------------------------------------------
# length normalization and standardization


def pad_or_crop(rep: RepRecord, target_len: int = TARGET_LEN) -> np.ndarray:
    """Feature-major ``(9, target_len)`` matrix: zero tail padding or head crop."""
    out = np.zeros((NUM_FEATURES, target_len))
    n = min(rep.length, target_len)
    out[:, :n] = rep.samples[:n].T
    return out


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(NUM_FEATURES)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(NUM_FEATURES), STD_FLOOR)


def fit_standardizer(
    train_sets: list[SetRecord], per_feature: bool = True, target_len: int = TARGET_LEN
) -> Standardizer:
    """Population mean/std over every sample that survives cropping.

    Padding zeros never enter the statistics. With ``per_feature=False`` a
    single mean/std pair is shared by all nine features.
    """
    chunks = [r.samples[:target_len] for s in train_sets for r in s.reps]
    if not chunks:
        raise ValueError("cannot fit a standardizer on an empty dataset")
    count = sum(c.shape[0] for c in chunks)
    total = np.sum([c.sum(axis=0) for c in chunks], axis=0)
    if per_feature:
        mean = total / count
        sq = np.sum([((c - mean) ** 2).sum(axis=0) for c in chunks], axis=0)
        std = np.sqrt(sq / count)
    else:
        mean = np.full(NUM_FEATURES, total.sum() / (count * NUM_FEATURES))
        sq = sum(((c - mean) ** 2).sum() for c in chunks)
        std = np.full(NUM_FEATURES, math.sqrt(sq / (count * NUM_FEATURES)))
    return Standardizer(mean, std)


def apply_standardizer(std: Standardizer, padded: np.ndarray, valid_len: int) -> np.ndarray:
    out = np.zeros_like(padded, dtype=np.float64)
    n = min(valid_len, padded.shape[1])
    out[:, :n] = (padded[:, :n] - std.mean[:, None]) / std.std[:, None]
    return out


def invert_standardizer(std: Standardizer, standardized: np.ndarray, valid_len: int) -> np.ndarray:
    out = np.zeros_like(standardized, dtype=np.float64)
    n = min(valid_len, standardized.shape[1])
    out[:, :n] = standardized[:, :n] * std.std[:, None] + std.mean[:, None]
    return out


def preprocess_rep(rep: RepRecord, std: Standardizer, target_len: int = TARGET_LEN) -> np.ndarray:
    return apply_standardizer(std, pad_or_crop(rep, target_len), min(rep.length, target_len))


# --------------------------------------------------------------------------
# splitting


@dataclass
class SplitDataset:
    train_sets: list[SetRecord]
    test_sets: list[SetRecord]
    standardizer: Standardizer


def split_by_set(
    sets: list[SetRecord], test_fraction: float, seed: int, per_feature: bool = True
) -> SplitDataset:
    """Seeded set-level split; partitions keep the input order."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(sets) < 2:
        raise ValueError(f"need at least 2 sets to split, got {len(sets)}")
    ids = [s.set_id for s in sets]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate set_id in dataset")
    n_test = min(math.ceil(test_fraction * len(sets)), len(sets) - 1)
    perm = np.random.default_rng(seed).permutation(len(sets))
    test_idx = set(perm[:n_test].tolist())
    train = [s for i, s in enumerate(sets) if i not in test_idx]
    test = [s for i, s in enumerate(sets) if i in test_idx]
    return SplitDataset(train, test, fit_standardizer(train, per_feature=per_feature))
