"""Seeded synthetic exercise data.

Every class owns a signature of two sinusoids per feature and a typical rep
duration. A rep samples the signature at 200 Hz over a jittered duration, with
a random start phase and white noise. Sets with few reps get extra noise so
that rep-count-stratified accuracy behaves like heavy-load, low-rep training.

Each set draws from its own stream keyed by ``(seed, class, index)``; raising
``sets_per_class`` therefore only appends sets and never changes earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from repforge.dataset import NUM_FEATURES, RepRecord, SetRecord
from repforge.dataset import export as _export_jsonl

SAMPLE_RATE = 200.0
MAX_REPS = 20
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def default_rep_count_weights() -> tuple[float, ...]:
    # P(<4 reps)=9%, P(<8)=36%, P(<20)=94%
    w = [0.03] * 3 + [0.0675] * 4 + [0.58 / 12] * 12 + [0.06]
    return tuple(w)


@dataclass
class SynthConfig:
    num_classes: int = 10
    sets_per_class: int = 50
    rep_count_weights: tuple[float, ...] = default_rep_count_weights()
    rep_length_range: tuple[int, int] = (200, 784)
    duration_jitter: float = 0.08
    phase_jitter: float = 0.35
    base_noise_sigma: float = 3.0
    few_rep_variance_boost: float = 2.4
    few_rep_threshold: int = 4
    seed: int = 42

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.sets_per_class < 1:
            raise ValueError("sets_per_class must be >= 1")
        w = np.asarray(self.rep_count_weights, dtype=np.float64)
        if w.ndim != 1 or not 1 <= len(w) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("rep_count_weights must be non-negative with a positive sum")
        lo, hi = self.rep_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad rep_length_range {self.rep_length_range}")
        if min(self.base_noise_sigma, self.duration_jitter, self.phase_jitter) < 0 or self.few_rep_variance_boost < 0:
            raise ValueError("noise and jitter parameters must be >= 0")


@dataclass
class ClassSignature:
    amplitudes: np.ndarray  # (9, 2)
    frequencies: np.ndarray  # (9, 2), Hz
    phases: np.ndarray  # (9, 2)
    mean_length: int

    def render(self, n: int, phase_shift: float = 0.0) -> np.ndarray:
        t = np.arange(n)[:, None, None] / SAMPLE_RATE
        waves = self.amplitudes * np.sin(2 * np.pi * self.frequencies * t + self.phases + phase_shift)
        return waves.sum(axis=2)


def class_signatures(cfg: SynthConfig) -> list[ClassSignature]:
    rng = np.random.default_rng([cfg.seed, 0])
    lo, hi = cfg.rep_length_range
    sigs: list[ClassSignature] = []
    seen: set[tuple[float, ...]] = set()
    while len(sigs) < cfg.num_classes:
        freqs = rng.uniform(0.25, 3.0, size=(NUM_FEATURES, 2))
        amps = rng.uniform(0.5, 2.0, size=(NUM_FEATURES, 2))
        phases = rng.uniform(0.0, 2 * np.pi, size=(NUM_FEATURES, 2))
        mean_len = int(rng.integers(lo, max(lo, int(0.95 * hi)) + 1))
        key = tuple(np.round(freqs, 12).ravel())
        if key in seen:
            continue
        seen.add(key)
        sigs.append(ClassSignature(amps, freqs, phases, mean_len))
    return sigs


def _rep_length(rng: np.random.Generator, sig: ClassSignature, cfg: SynthConfig) -> int:
    return max(1, int(round(sig.mean_length * (1.0 + cfg.duration_jitter * rng.standard_normal()))))


def rep_count(cfg: SynthConfig, label: int, index: int) -> int:
    """Rep count of set ``index`` of class ``label``.

    A per-class golden-ratio sequence replaces i.i.d. draws so that even a few
    dozen sets per class reproduce the configured histogram closely.
    """
    offset = np.random.default_rng([cfg.seed, 2, label]).random()
    u = (offset + index * _GOLDEN) % 1.0
    cdf = np.cumsum(cfg.rep_count_weights) / np.sum(cfg.rep_count_weights)
    return int(np.searchsorted(cdf, u, side="right")) + 1


def generate_set(cfg: SynthConfig, sig: ClassSignature, label: int, index: int) -> SetRecord:
    rng = np.random.default_rng([cfg.seed, 1, label, index])
    n_reps = min(rep_count(cfg, label, index), len(cfg.rep_count_weights))
    sigma = cfg.base_noise_sigma
    jitter = cfg.phase_jitter
    if n_reps < cfg.few_rep_threshold:
        sigma *= cfg.few_rep_variance_boost
        jitter *= cfg.few_rep_variance_boost
    reps = []
    for _ in range(n_reps):
        n = _rep_length(rng, sig, cfg)
        clean = sig.render(n, jitter * rng.standard_normal())
        reps.append(RepRecord(clean + sigma * rng.standard_normal(clean.shape)))
    return SetRecord(f"c{label:03d}-s{index:05d}", label, reps)


def generate_dataset(cfg: SynthConfig) -> list[SetRecord]:
    sigs = class_signatures(cfg)
    return [
        generate_set(cfg, sigs[label], label, index)
        for index in range(cfg.sets_per_class)
        for label in range(cfg.num_classes)
    ]


def export(sets: list[SetRecord], path, num_classes: int | None = None) -> None:
    _export_jsonl(sets, path, num_classes)
