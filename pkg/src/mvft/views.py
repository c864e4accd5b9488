"""Windowing and the three per-window views: raw samples, DFT magnitudes, statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

STAT_NAMES = ("mean", "variance", "median", "maximum", "minimum", "peaks")
VIEWS = ("t", "f", "s")
STD_FLOOR = 1e-8


class WindowError(ValueError):
    pass


@dataclass(frozen=True)
class SensorWindow:
    samples: np.ndarray  # T x C
    timestamps: np.ndarray  # T, non-decreasing integers
    label: int
    user: int = 0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 2:
            raise WindowError(f"window needs a T x C matrix with T >= 2, got {samples.shape}")
        if np.isnan(samples).any():
            raise WindowError("window contains NaN samples")
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if ts.shape != (samples.shape[0],):
            raise WindowError(f"{ts.shape[0] if ts.ndim else 0} timestamps for {samples.shape[0]} samples")
        if np.any(np.diff(ts) < 0):
            raise WindowError("timestamps must be non-decreasing")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "timestamps", ts)

    @property
    def length(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class ViewBundle:
    temporal: np.ndarray  # T x C
    frequent: np.ndarray  # (T//2 + 1) x C
    statistic: np.ndarray  # 6 x C
    timestamps: np.ndarray
    label: int


@dataclass
class ViewBatch:
    """Stacked bundles: the unit the model consumes."""

    temporal: np.ndarray  # B x T x C
    frequent: np.ndarray  # B x F x C
    statistic: np.ndarray  # B x 6 x C
    timestamps: np.ndarray  # B x T
    labels: np.ndarray  # B

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "ViewBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return ViewBatch(self.temporal[idx], self.frequent[idx], self.statistic[idx],
                         self.timestamps[idx], self.labels[idx])

    @classmethod
    def stack(cls, bundles: Sequence[ViewBundle]) -> "ViewBatch":
        if not bundles:
            raise WindowError("cannot stack an empty list of bundles")
        return cls(np.stack([b.temporal for b in bundles]),
                   np.stack([b.frequent for b in bundles]),
                   np.stack([b.statistic for b in bundles]),
                   np.stack([b.timestamps for b in bundles]),
                   np.array([b.label for b in bundles], dtype=np.int64))


def window_stream(samples, timestamps, labels, T: int, stride: int,
                  user: int = 0) -> list[SensorWindow]:
    """Fixed-length windows at offsets 0, stride, 2*stride, ...; trailing partial dropped.

    Window label is the majority label, ties going to the smaller class index.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    timestamps = np.asarray(timestamps, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    n = samples.shape[0]
    if T < 2 or stride < 1:
        raise WindowError(f"need T >= 2 and stride >= 1, got T={T}, stride={stride}")
    if timestamps.shape[0] != n or labels.shape[0] != n:
        raise WindowError("samples, timestamps and labels must have equal length")
    if n < T:
        raise WindowError(f"stream of {n} samples is shorter than window length {T}")
    windows = []
    for start in range(0, n - T + 1, stride):
        seg = labels[start:start + T]
        label = int(np.argmax(np.bincount(seg)))  # argmax takes the first maximum
        windows.append(SensorWindow(samples[start:start + T], timestamps[start:start + T], label, user))
    return windows


def dft_magnitude(x) -> np.ndarray:
    """|sum_n x[n] exp(-2 pi i k n / T)| for k = 0..T//2, along axis 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise WindowError("DFT needs at least 2 samples")
    return np.abs(np.fft.rfft(x, axis=0))


def compute_stats(x) -> np.ndarray:
    """Six statistics along axis 0: mean, population variance, median, max, min, peak count.

    A peak is an interior index strictly greater than both neighbours.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise WindowError("statistics need at least 2 samples")
    interior = x[1:-1]
    peaks = ((interior > x[:-2]) & (interior > x[2:])).sum(axis=0).astype(np.float64)
    return np.stack([x.mean(axis=0), x.var(axis=0), np.median(x, axis=0),
                     x.max(axis=0), x.min(axis=0), peaks])


def build_views(w: SensorWindow) -> ViewBundle:
    return ViewBundle(temporal=w.samples.copy(),
                      frequent=dft_magnitude(w.samples),
                      statistic=compute_stats(w.samples),
                      timestamps=w.timestamps.copy(),
                      label=int(w.label))


def build_batch(windows: Sequence[SensorWindow]) -> ViewBatch:
    return ViewBatch.stack([build_views(w) for w in windows])


@dataclass
class Normalizer:
    """Train-set z-score statistics for each view.

    Temporal statistics are per channel (pooled over time); frequent and
    statistic statistics are per (token row, channel), since their rows hold
    quantities of different scale.
    """

    temporal_mean: np.ndarray
    temporal_std: np.ndarray
    frequent_mean: np.ndarray
    frequent_std: np.ndarray
    statistic_mean: np.ndarray
    statistic_std: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def apply(self, batch: ViewBatch) -> ViewBatch:
        return ViewBatch((batch.temporal - self.temporal_mean) / self.temporal_std,
                         (batch.frequent - self.frequent_mean) / self.frequent_std,
                         (batch.statistic - self.statistic_mean) / self.statistic_std,
                         batch.timestamps, batch.labels)


def fit_normalizer(train: ViewBatch) -> Normalizer:
    if len(train) == 0:
        raise WindowError("cannot fit a normalizer on an empty training set")

    def stats(a, axes):
        return a.mean(axis=axes), np.maximum(a.std(axis=axes), STD_FLOOR)

    tm, ts = stats(train.temporal, (0, 1))
    fm, fs = stats(train.frequent, 0)
    sm, ss = stats(train.statistic, 0)
    return Normalizer(tm, ts, fm, fs, sm, ss)


def apply_normalizer(batch: ViewBatch, norm: Normalizer) -> ViewBatch:
    return norm.apply(batch)


def parse_views(spec: str) -> tuple[str, ...]:
    """'t,f,s' / 'tfs' / 'T,S' -> canonical ordered subset of ('t', 'f', 's')."""
    chosen = {c for c in spec.lower() if c not in ", "}
    unknown = chosen - set(VIEWS)
    if unknown:
        raise ValueError(f"unknown view(s) {sorted(unknown)}; choose from t, f, s")
    if not chosen:
        raise ValueError("view mask must select at least one view")
    return tuple(v for v in VIEWS if v in chosen)
