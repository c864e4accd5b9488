"""Raw WISDM-style ingestion, synthetic sensor streams, window datasets and splits."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .rng import SeededRng
from .views import SensorWindow, WindowError, window_stream

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line_no: int | None = None, text: str = ""):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{message}: {text!r}")
        self.line_no = line_no
        self.text = text
        self.reason = message


class SplitError(DataError):
    pass


# ---------------------------------------------------------------- raw records


@dataclass(frozen=True)
class RawRecord:
    user: int
    activity: str
    timestamp: int
    x: float
    y: float
    z: float


def parse_raw_line(line: str, line_no: int | None = None) -> RawRecord:
    """Parse ``user,activity,timestamp,x,y,z;`` (trailing ``;`` and whitespace optional)."""
    text = line.strip()
    body = text[:-1] if text.endswith(";") else text
    parts = [p.strip() for p in body.split(",")]
    if len(parts) != 6:
        raise ParseError(f"field count {len(parts)}, expected 6", line_no, text)
    user, activity, ts, *xyz = parts
    if not activity:
        raise ParseError("empty activity", line_no, text)
    try:
        uid, stamp = int(user), int(ts)
    except ValueError:
        raise ParseError("non-integer user or timestamp", line_no, text) from None
    try:
        x, y, z = (float(v) for v in xyz)
    except ValueError:
        raise ParseError("non-numeric acceleration", line_no, text) from None
    if not all(math.isfinite(v) for v in (x, y, z)):
        raise ParseError("non-finite acceleration", line_no, text)
    return RawRecord(uid, activity, stamp, x, y, z)


def parse_raw_lines(lines: Iterable[str]) -> tuple[list[RawRecord], list[ParseError]]:
    """Every non-blank line yields exactly one record or one collected error."""
    records, errors = [], []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(parse_raw_line(line, i))
        except ParseError as exc:
            errors.append(exc)
    return records, errors


def parse_raw_file(path) -> tuple[list[RawRecord], list[ParseError]]:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_raw_lines(fh)


@dataclass
class Segment:
    """A contiguous run of one user's samples with a single activity."""

    user: int
    samples: np.ndarray  # n x 3
    timestamps: np.ndarray
    labels: np.ndarray


def records_to_stream(records: list[RawRecord]) -> tuple[list[Segment], list[str], int]:
    """Stable sort by (user, timestamp), drop duplicate stamps, cut into activity runs.

    Returns the segments, the activity names in first-appearance order (index =
    class id) and the number of duplicate records dropped.
    """
    label_map: dict[str, int] = {}
    for r in records:
        label_map.setdefault(r.activity, len(label_map))
    ordered = sorted(records, key=lambda r: (r.user, r.timestamp))
    kept, dropped = [], 0
    for r in ordered:
        if kept and kept[-1].user == r.user and kept[-1].timestamp == r.timestamp:
            dropped += 1
            continue
        kept.append(r)
    if dropped:
        log.info("dropped %d records with duplicate (user, timestamp)", dropped)
    segments: list[Segment] = []
    start = 0
    for i in range(1, len(kept) + 1):
        if i == len(kept) or kept[i].user != kept[start].user or kept[i].activity != kept[start].activity:
            run = kept[start:i]
            segments.append(Segment(
                user=run[0].user,
                samples=np.array([[r.x, r.y, r.z] for r in run], dtype=np.float64),
                timestamps=np.array([r.timestamp for r in run], dtype=np.int64),
                labels=np.full(len(run), label_map[run[0].activity], dtype=np.int64)))
            start = i
    return segments, list(label_map), dropped


# ---------------------------------------------------------------- window datasets


@dataclass
class WindowSet:
    samples: np.ndarray  # N x T x C
    timestamps: np.ndarray  # N x T
    labels: np.ndarray  # N
    users: np.ndarray  # N
    label_names: list[str]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.samples.shape[1])

    @property
    def n_channels(self) -> int:
        return int(self.samples.shape[2])

    @property
    def n_class(self) -> int:
        return len(self.label_names)

    def windows(self) -> list[SensorWindow]:
        return [SensorWindow(self.samples[i], self.timestamps[i], int(self.labels[i]), int(self.users[i]))
                for i in range(len(self))]

    def content_hash(self) -> str:
        """SHA-256 over the canonical little-endian arrays and the label names."""
        h = hashlib.sha256()
        for arr, dtype in ((self.samples, "<f8"), (self.timestamps, "<i8"), (self.labels, "<i8"),
                           (self.users, "<i8")):
            a = np.ascontiguousarray(arr, dtype=dtype)
            h.update(json.dumps(list(a.shape)).encode())
            h.update(a.tobytes())
        h.update(json.dumps(self.label_names).encode("utf-8"))
        return h.hexdigest()

    @classmethod
    def from_windows(cls, windows: list[SensorWindow], label_names: list[str], meta=None) -> "WindowSet":
        if not windows:
            raise DataError("no windows")
        return cls(np.stack([w.samples for w in windows]), np.stack([w.timestamps for w in windows]),
                   np.array([w.label for w in windows], dtype=np.int64),
                   np.array([w.user for w in windows], dtype=np.int64), list(label_names), dict(meta or {}))


def save_windows(path, ws: WindowSet) -> None:
    meta = {"label_names": ws.label_names, "meta": ws.meta}
    buf = io.BytesIO()
    np.savez(buf, samples=ws.samples, timestamps=ws.timestamps, labels=ws.labels, users=ws.users,
             meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8))
    Path(path).write_bytes(buf.getvalue())


def load_windows(path) -> WindowSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes().decode("utf-8"))
            ws = WindowSet(z["samples"].astype(np.float64), z["timestamps"].astype(np.int64),
                           z["labels"].astype(np.int64), z["users"].astype(np.int64),
                           list(meta["label_names"]), meta.get("meta", {}))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: not a window dataset ({exc})") from None
    if ws.samples.ndim != 3 or len({ws.samples.shape[0], ws.timestamps.shape[0], len(ws.labels),
                                    len(ws.users)}) != 1:
        raise DataError(f"{path}: inconsistent array shapes")
    if len(ws) and (ws.labels.min() < 0 or ws.labels.max() >= ws.n_class):
        raise DataError(f"{path}: label outside the {ws.n_class} named classes")
    return ws


def windows_from_raw(path, T: int = 30, stride: int | None = None):
    """Parse a raw file and window each activity run; returns (WindowSet, parse errors)."""
    records, errors = parse_raw_file(path)
    segments, names, dropped = records_to_stream(records)
    windows = []
    for seg in segments:
        try:
            windows.extend(window_stream(seg.samples, seg.timestamps, seg.labels, T, stride or T, seg.user))
        except WindowError:
            continue  # run shorter than one window
    meta = {"source": str(path), "T": T, "stride": stride or T, "records": len(records),
            "parse_errors": len(errors), "duplicates_dropped": dropped}
    if not windows:
        raise DataError(f"{path}: no complete windows of length {T}")
    return WindowSet.from_windows(windows, names, meta), errors


# ---------------------------------------------------------------- synthetic data


class SynthSpecError(ValueError):
    pass


@dataclass
class ChannelRecipe:
    sinusoids: list[list[float]] = field(default_factory=list)  # [frequency in cycles/window, amplitude]
    mean_shift: float = 0.0
    spikes: int = 0
    spike_amplitude: float = 3.0


@dataclass
class ClassRecipe:
    name: str
    channels: list[ChannelRecipe]
    noise_std: float = 1.0


@dataclass
class SynthSpec:
    classes: list[ClassRecipe]
    samples_per_class: int = 500
    T: int = 30
    C: int = 3
    seed: int = 0
    n_users: int = 10
    sample_period: int = 1
    timestamp_jitter: int = 0

    @property
    def n_class(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        if not self.classes:
            raise SynthSpecError("at least one class recipe is required")
        if self.T < 2 or self.C < 1 or self.samples_per_class < 0 or self.n_users < 1:
            raise SynthSpecError("need T >= 2, C >= 1, samples_per_class >= 0, n_users >= 1")
        if self.sample_period < 1 or self.timestamp_jitter < 0:
            raise SynthSpecError("sample_period must be >= 1 and timestamp_jitter >= 0")
        seen = set()
        for cls in self.classes:
            if len(cls.channels) != self.C:
                raise SynthSpecError(f"class {cls.name!r} has {len(cls.channels)} channel recipes, C={self.C}")
            if cls.noise_std < 0:
                raise SynthSpecError(f"class {cls.name!r}: noise_std must be >= 0")
            for ch in cls.channels:
                if ch.spikes < 0 or ch.spikes > self.T:
                    raise SynthSpecError(f"class {cls.name!r}: spikes must be in [0, T]")
                if any(len(s) != 2 for s in ch.sinusoids):
                    raise SynthSpecError(f"class {cls.name!r}: sinusoids are [frequency, amplitude] pairs")
            key = json.dumps({"c": [asdict(ch) for ch in cls.channels], "n": cls.noise_std}, sort_keys=True)
            if key in seen:
                raise SynthSpecError(f"class {cls.name!r} duplicates another class recipe")
            seen.add(key)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        try:
            d = dict(d)
            d["classes"] = [ClassRecipe(name=c["name"], noise_std=c.get("noise_std", 1.0),
                                        channels=[ChannelRecipe(**ch) for ch in c["channels"]])
                            for c in d["classes"]]
            spec = cls(**d)
        except (KeyError, TypeError) as exc:
            raise SynthSpecError(f"malformed synthetic spec: {exc}") from None
        spec.validate()
        return spec


def default_synth_spec(n_class: int = 3, samples_per_class: int = 500, T: int = 30, C: int = 3,
                       seed: int = 0, noise_std: float = 1.0) -> SynthSpec:
    """Classes told apart either by dominant frequency or by sample statistics.

    Class k uses ``2 + 2 * (k % 2) + 4 * (k // 4)`` cycles per window; classes
    with ``(k // 2) % 2 == 1`` also carry two positive spikes per channel. The
    spike classes get a compensating mean shift and lower noise so that each
    window's expected mean and variance, and hence the DC bin and the total
    spectral energy, match the spike-free classes: spikes show up in the
    order statistics (max, min, median), not in the magnitude spectrum.
    """
    spikes, amp = 2, 3.0 * (noise_std if noise_std > 0 else 1.0)
    spike_var = spikes * amp ** 2 / T * (1.0 - spikes / T)
    classes = []
    for k in range(n_class):
        freq = 2.0 + 2.0 * (k % 2) + 4.0 * (k // 4)
        spiky = (k // 2) % 2 == 1
        n_spk = spikes if spiky else 0
        channels = [ChannelRecipe(sinusoids=[[freq, 1.0 / (1 + c)]], mean_shift=-n_spk * amp / T,
                                  spikes=n_spk, spike_amplitude=amp) for c in range(C)]
        noise = float(np.sqrt(max(0.0, noise_std ** 2 - spike_var))) if spiky else noise_std
        classes.append(ClassRecipe(name=f"class{k}", channels=channels, noise_std=noise))
    spec = SynthSpec(classes=classes, samples_per_class=samples_per_class, T=T, C=C, seed=seed)
    spec.validate()
    return spec


def generate_synthetic(spec: SynthSpec) -> WindowSet:
    """Windows of sum-of-sinusoids (random phase) + spikes + mean shift + gaussian noise.

    Output is a pure function of ``spec``; windows are ordered class by class.
    """
    spec.validate()
    rng = SeededRng(spec.seed)
    T, C = spec.T, spec.C
    t = np.arange(T, dtype=np.float64)
    samples, stamps, labels, users = [], [], [], []
    for k, cls in enumerate(spec.classes):
        for j in range(spec.samples_per_class):
            x = np.zeros((T, C))
            for c, ch in enumerate(cls.channels):
                for freq, amp in ch.sinusoids:
                    phase = 2.0 * np.pi * rng.uniform(1)[0]
                    x[:, c] += amp * np.sin(2.0 * np.pi * freq * t / T + phase)
                if ch.spikes:
                    x[rng.permutation(T)[:ch.spikes], c] += ch.spike_amplitude
                x[:, c] += ch.mean_shift
            x += cls.noise_std * rng.normal(T * C).reshape(T, C)
            steps = np.full(T - 1, spec.sample_period, dtype=np.int64)
            if spec.timestamp_jitter:
                steps += rng.integers(T - 1, spec.timestamp_jitter + 1)
            samples.append(x)
            stamps.append(np.concatenate([[0], np.cumsum(steps)]))
            labels.append(k)
            users.append(j % spec.n_users)
    names = [cls.name for cls in spec.classes]
    meta = {"synthetic_spec": spec.to_dict()}
    if not samples:
        return WindowSet(np.zeros((0, T, C)), np.zeros((0, T), dtype=np.int64), np.zeros(0, dtype=np.int64),
                         np.zeros(0, dtype=np.int64), names, meta)
    return WindowSet(np.stack(samples), np.stack(stamps).astype(np.int64), np.array(labels, dtype=np.int64),
                     np.array(users, dtype=np.int64), names, meta)


# ---------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]
    policy: str
    seed: int
    ratios: list[float]

    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def _check_ratios(ratios) -> list[float]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9 or ratios[0] <= 0:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1 with train > 0, got {ratios}")
    return ratios


def _largest_remainder(total: int, ratios: list[float]) -> list[int]:
    exact = [r * total for r in ratios]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda s: (-(exact[s] - counts[s]), s))
    for s in order[:total - sum(counts)]:
        counts[s] += 1
    return counts


def make_split(labels, users=None, policy: str = "stratified", ratios=(0.8, 0.1, 0.1),
               seed: int = 0) -> DatasetSplit:
    labels = np.asarray(labels, dtype=np.int64)
    ratios = _check_ratios(ratios)
    n = labels.shape[0]
    if n == 0:
        raise SplitError("cannot split an empty dataset")
    rng = SeededRng(seed)
    parts: list[list[int]] = [[], [], []]
    if policy == "stratified":
        active = sum(r > 0 for r in ratios)
        classes = np.unique(labels)
        sizes = {c: int((labels == c).sum()) for c in classes}
        small = [int(c) for c in classes if sizes[c] < active]
        if small:
            raise SplitError(f"classes {small} have fewer windows than the {active} requested splits")
        totals = _largest_remainder(n, ratios)
        quota = {c: [math.floor(r * sizes[c]) for r in ratios] for c in classes}
        deficit = [totals[s] - sum(quota[c][s] for c in classes) for s in range(3)]
        for c in sorted(classes, key=lambda c: (-(sizes[c] - sum(quota[c])), c)):
            while sum(quota[c]) < sizes[c]:
                frac = [ratios[s] * sizes[c] - quota[c][s] for s in range(3)]
                open_ = [s for s in range(3) if deficit[s] > 0] or [s for s in range(3) if ratios[s] > 0]
                s = max(open_, key=lambda s: (frac[s], -s))
                quota[c][s] += 1
                deficit[s] -= 1
        for c in classes:
            members = np.flatnonzero(labels == c)
            members = members[rng.permutation(members.size)]
            bounds = np.cumsum(quota[c])
            for s, chunk in enumerate(np.split(members, bounds[:-1])):
                parts[s].extend(int(i) for i in chunk)
    elif policy == "by-user":
        if users is None:
            raise SplitError("by-user split needs user ids")
        users = np.asarray(users, dtype=np.int64)
        uniq = np.unique(users)
        if uniq.size < sum(r > 0 for r in ratios):
            raise SplitError(f"{uniq.size} users cannot fill {sum(r > 0 for r in ratios)} splits")
        targets = [r * n for r in ratios]
        filled = [0, 0, 0]
        for u in uniq[rng.permutation(uniq.size)]:
            members = np.flatnonzero(users == u)
            s = max((s for s in range(3) if ratios[s] > 0), key=lambda s: (targets[s] - filled[s], -s))
            parts[s].extend(int(i) for i in members)
            filled[s] += members.size
    else:
        raise SplitError(f"unknown split policy {policy!r}")
    return DatasetSplit(*(sorted(p) for p in parts), policy=policy, seed=seed, ratios=ratios)
