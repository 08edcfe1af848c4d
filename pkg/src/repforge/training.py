"""Minibatch training loop, binary checkpoints and the per-epoch log."""

from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from repforge import layers
from repforge.dataset import SetRecord, SplitDataset, Standardizer, preprocess_rep
from repforge.imaging import format_array
from repforge.model import Model, ModelConfig, backward, build_model, forward_batch, predict_batch
from repforge.optimizer import AdamState, adam_step

log = logging.getLogger(__name__)

MAGIC = b"RFCK"
FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 40
    lr: float = 0.0005
    shuffle_seed: int = 0
    eval_every: int = 1
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("batch_size, epochs and eval_every must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "train_acc", "test_acc", "seconds"])
            for r in self.records:
                test = "" if r.test_acc is None else repr(r.test_acc)
                w.writerow([r.epoch, repr(r.loss), repr(r.train_acc), test, f"{r.seconds:.3f}"])


# --------------------------------------------------------------------------
# data staging


def stage_images(
    sets: list[SetRecord], standardizer: Standardizer, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Preprocess and format every rep: ``(images (N, H, W, C), labels (N,))``."""
    n = sum(len(s.reps) for s in sets)
    images = np.empty((n, *config.input_shape))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for s in sets:
        for rep in s.reps:
            images[i] = format_array(preprocess_rep(rep, standardizer), config.layout)
            labels[i] = s.exercise_id
            i += 1
    return images, labels


def _accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if not len(labels):
        return float("nan")
    pred, _ = predict_batch(model, images)
    return float(np.mean(pred == labels))


def train_step(model: Model, x: np.ndarray, y: np.ndarray, opt: AdamState, rng) -> tuple[float, np.ndarray]:
    """One Adam step on the batch-mean loss; returns (loss, batch probs)."""
    logits, caches = forward_batch(model, x, training=True, rng=rng)
    loss, probs, grad = layers.softmax_cross_entropy(logits, y)
    if not math.isfinite(loss):
        return loss, probs
    grads = backward(model, caches, grad)
    adam_step(model.params, grads, opt)
    return loss, probs


def run_training(
    model: Model,
    data: SplitDataset,
    tcfg: TrainConfig,
    opt: AdamState | None = None,
    staged: tuple | None = None,
) -> tuple[Model, TrainLog]:
    """Train ``model`` in place.

    ``staged`` may carry pre-formatted ``(train_x, train_y, test_x, test_y)``
    arrays to skip preprocessing when the same split is reused.
    """
    if opt is None:
        opt = AdamState(lr=tcfg.lr)
    if staged is None:
        train_x, train_y = stage_images(data.train_sets, data.standardizer, model.config)
        test_x, test_y = stage_images(data.test_sets, data.standardizer, model.config)
    else:
        train_x, train_y, test_x, test_y = staged
    if not len(train_y):
        raise ValueError("no training reps")
    if train_y.max() >= model.config.num_classes:
        raise ValueError(f"label {train_y.max()} exceeds model with {model.config.num_classes} classes")

    model.standardizer = data.standardizer
    history = TrainLog()
    n = len(train_y)
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([tcfg.shuffle_seed, epoch]).permutation(n)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            rng = np.random.default_rng([tcfg.shuffle_seed, epoch, b, 1])
            loss, probs = train_step(model, train_x[idx], train_y[idx], opt, rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            total_loss += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == train_y[idx]))
        test_acc = None
        if len(test_y) and (epoch % tcfg.eval_every == 0 or epoch == tcfg.epochs):
            test_acc = _accuracy(model, test_x, test_y)
        rec = EpochRecord(epoch, total_loss / n, correct / n, test_acc, time.perf_counter() - t0)
        history.records.append(rec)
        log.info(
            "epoch %d loss %.5f train_acc %.4f test_acc %s (%.1fs)",
            epoch, rec.loss, rec.train_acc, "-" if test_acc is None else f"{test_acc:.4f}", rec.seconds,
        )
        if tcfg.checkpoint_path:
            save_checkpoint(model, opt, tcfg.checkpoint_path)
    return model, history


# --------------------------------------------------------------------------
# checkpoints


def _tensors(model: Model, opt: AdamState) -> list[tuple[str, np.ndarray]]:
    out = list(zip(model.names, model.params))
    if opt.first_moment:
        out += [(f"adam.m.{n}", m) for n, m in zip(model.names, opt.first_moment)]
        out += [(f"adam.v.{n}", v) for n, v in zip(model.names, opt.second_moment)]
    if model.standardizer is not None:
        out += [("standardizer.mean", model.standardizer.mean), ("standardizer.std", model.standardizer.std)]
    out.append(("adam.state", np.array([opt.step_count, opt.lr, opt.beta1, opt.beta2, opt.epsilon], dtype=np.float64)))
    return out


def save_checkpoint(model: Model, opt: AdamState, path) -> None:
    config_text = model.config.to_text().encode("utf-8")
    tensors = _tensors(model, opt)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config_text)), config_text, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[Model, AdamState]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a repforge checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_text(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None
    if expected_config is not None and expected_config.to_text() != config.to_text():
        raise CheckpointError("checkpoint config is incompatible with the requested model config")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last tensor")

    model = build_model(config)
    for i, name in enumerate(model.names):
        arr = tensors.get(name)
        if arr is None or arr.shape != model.params[i].shape:
            got = None if arr is None else list(arr.shape)
            raise CheckpointError(
                f"tensor {name!r} incompatible with declared config: expected "
                f"{list(model.params[i].shape)}, found {got}"
            )
        model.params[i] = arr.copy()
    if "standardizer.mean" in tensors:
        model.standardizer = Standardizer(tensors["standardizer.mean"], tensors["standardizer.std"])
    if "adam.state" not in tensors:
        raise CheckpointError("missing optimizer state")
    step, lr, b1, b2, eps = tensors["adam.state"]
    opt = AdamState(lr=float(lr), beta1=float(b1), beta2=float(b2), epsilon=float(eps), step_count=int(step))
    if f"adam.m.{model.names[0]}" in tensors:
        opt.first_moment = [tensors[f"adam.m.{n}"].copy() for n in model.names]
        opt.second_moment = [tensors[f"adam.v.{n}"].copy() for n in model.names]
        opt.ensure_moments(model.params)
    return model, opt
