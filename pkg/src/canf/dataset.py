"""Hourly load ingestion, week-level train/test split, rolling windows and standardization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np

from .errors import (
    NegativeLoad,
    NonFiniteInput,
    NonHourlyCadence,
    ParseError,
    SegmentTooShort,
    TooShort,
    ZeroVariance,
)

log = logging.getLogger(__name__)

HOURS_PER_WEEK = 168
DEFAULT_START = "2021-01-01T00:00:00"


@dataclass
class LoadSeries:
    values: np.ndarray
    start: str = DEFAULT_START
    location: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteInput("load values must be finite")
        if np.any(self.values < 0):
            raise NegativeLoad(f"negative load at index {int(np.argmax(self.values < 0))}")

    def __len__(self):
        return self.values.size

    def timestamps(self):
        t0 = datetime.fromisoformat(self.start)
        return [(t0 + timedelta(hours=i)).isoformat() for i in range(len(self))]

    def to_csv(self, path, timestamp_column="timestamp", value_column="load_kwh"):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([timestamp_column, value_column])
            for ts, v in zip(self.timestamps(), self.values):
                w.writerow([ts, repr(float(v))])


@dataclass
class Segment:
    """Contiguous slice of a series; ``offset`` is the index of its first hour."""

    offset: int
    values: np.ndarray

    def __len__(self):
        return self.values.size


@dataclass
class SequenceDataset:
    """Rolling windows of length ``L + 1 + K``.

    The first ``L + 1`` columns are the conditioning input, the last ``K`` the
    forecast target. ``origins`` holds each window's start index in the
    source series; ``stats`` is the ``(mean, std)`` applied, if any.
    """

    windows: np.ndarray
    L: int
    K: int
    stats: tuple | None = None
    origins: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=float).reshape(-1, self.L + 1 + self.K)
        if not np.all(np.isfinite(self.windows)):
            raise NonFiniteInput("windows contain non-finite values")
        if self.origins.size == 0:
            self.origins = np.arange(self.windows.shape[0])
        if self.stats is not None and self.stats[1] <= 0:
            raise ZeroVariance("standardization std must be positive")

    def __len__(self):
        return self.windows.shape[0]

    @property
    def split(self):
        return self.L + 1

    @property
    def inputs(self):
        return self.windows[:, : self.L + 1]

    @property
    def targets(self):
        return self.windows[:, self.L + 1:]

    def subset(self, idx):
        return replace(self, windows=self.windows[idx], origins=self.origins[idx])


def load_csv(path, value_column="load_kwh", timestamp_column="timestamp", location=""):
    """Read an hourly CSV with a header row. Rows must be consecutive hours."""
    values, stamps = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("empty file", row=1)
        for col in (value_column, timestamp_column):
            if col not in reader.fieldnames:
                raise ParseError(f"missing column {col!r}; have {reader.fieldnames}", row=1)
        for row_no, row in enumerate(reader, start=2):
            try:
                ts = datetime.fromisoformat(row[timestamp_column].strip())
                v = float(row[value_column])
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), row=row_no) from exc
            if not math.isfinite(v):
                raise ParseError(f"non-finite load {v}", row=row_no)
            if v < 0:
                raise NegativeLoad(f"row {row_no}: negative load {v}")
            if stamps and ts - stamps[-1] != timedelta(hours=1):
                raise NonHourlyCadence(
                    f"row {row_no}: timestamp {ts.isoformat()} follows {stamps[-1].isoformat()}"
                )
            stamps.append(ts)
            values.append(v)
    if not values:
        raise ParseError("no data rows", row=2)
    return LoadSeries(np.array(values), stamps[0].isoformat(), location)


def week_split(series, test_fraction=0.25, rng_seed=0):
    """Assign ``ceil(fraction * weeks)`` whole 168-hour weeks to test at random.

    Weeks are anchored at the first timestamp; a trailing partial week goes
    to train. Consecutive weeks on the same side merge into one segment.

    Returns
    -------
    (train_segments, test_segments)
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    values = series.values if isinstance(series, LoadSeries) else np.asarray(series, float)
    n_weeks = values.size // HOURS_PER_WEEK
    if n_weeks < 8:
        raise TooShort(f"need at least 8 whole weeks, got {n_weeks}")
    n_test = math.ceil(test_fraction * n_weeks)
    rng = np.random.default_rng(rng_seed)
    is_test = np.zeros(n_weeks, dtype=bool)
    is_test[rng.choice(n_weeks, size=n_test, replace=False)] = True
    hour_side = np.repeat(is_test, HOURS_PER_WEEK)
    hour_side = np.concatenate([hour_side, np.zeros(values.size - hour_side.size, dtype=bool)])

    train, test = [], []
    start = 0
    for i in range(1, values.size + 1):
        if i == values.size or hour_side[i] != hour_side[start]:
            seg = Segment(start, values[start:i].copy())
            (test if hour_side[start] else train).append(seg)
            start = i
    return train, test


def rolling_windows(segments, L, K, stride=1):
    """Every ``stride``-spaced window of length ``L+1+K`` inside each segment.

    Windows never straddle segments. Short segments are skipped with a
    warning; if all are skipped :class:`SegmentTooShort` is raised.
    """
    if isinstance(segments, Segment):
        segments = [segments]
    width = L + 1 + K
    rows, origins = [], []
    for seg in segments:
        if len(seg) < width:
            log.warning("segment at offset %d (length %d) shorter than window %d; skipped",
                        seg.offset, len(seg), width)
            continue
        starts = np.arange(0, len(seg) - width + 1, stride)
        idx = starts[:, None] + np.arange(width)
        rows.append(seg.values[idx])
        origins.append(seg.offset + starts)
    if not rows:
        raise SegmentTooShort(f"no segment holds a window of length {width}")
    return SequenceDataset(np.vstack(rows), L, K, None, np.concatenate(origins))


def standardize(ds, stats=None):
    """Pooled affine standardization ``(x - mean) / std``.

    With ``stats=None`` the pooled mean and std of ``ds`` are used; pass the
    training statistics to standardize held-out data without leakage.
    """
    if ds.stats is not None:
        raise ValueError("dataset is already standardized")
    if stats is None:
        mean = float(ds.windows.mean())
        std = float(ds.windows.std())
    else:
        mean, std = map(float, stats)
    if not std > 0:
        raise ZeroVariance("cannot standardize with zero variance")
    return replace(ds, windows=(ds.windows - mean) / std, stats=(mean, std))


def destandardize(ds):
    if ds.stats is None:
        return ds
    mean, std = ds.stats
    return replace(ds, windows=ds.windows * std + mean, stats=None)


def train_val_split(ds, val_fraction=0.2):
    """Hold out the last ``val_fraction`` of windows (in series order) for validation."""
    n_val = max(1, int(round(val_fraction * len(ds))))
    order = np.argsort(ds.origins, kind="stable")
    return ds.subset(np.sort(order[:-n_val])), ds.subset(np.sort(order[-n_val:]))


@dataclass
class SynthParams:
    """Synthetic hourly load: daily profile, weekly modulation, AR(1) noise, appliance spikes, positive offset."""

    base: float = 1.0
    daily_amplitude: float = 0.8
    # sharpness > 0 gives a peaked (non-sinusoidal) evening profile
    peak_sharpness: float = 2.0
    peak_hour: float = 19.0
    morning_amplitude: float = 0.25
    morning_hour: float = 7.0
    weekend_factor: float = 0.6
    weekly_amplitude: float = 0.1
    noise_amplitude: float = 0.08
    noise_phi: float = 0.7
    multiplicative_noise: float = 0.5
    floor: float = 0.05
    # appliance events: Bernoulli starts per hour, exponential size, geometric decay;
    # the start rate follows profile ** spike_occupancy (0 gives a flat rate)
    spike_rate: float = 0.1
    spike_size: float = 0.5
    spike_persistence: float = 0.5
    spike_occupancy: float = 2.0

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


def _profile(hours, p):
    h = hours % 24
    evening = np.exp(p.peak_sharpness * (np.cos(2 * np.pi * (h - p.peak_hour) / 24) - 1))
    morning = np.exp(4.0 * (np.cos(2 * np.pi * (h - p.morning_hour) / 24) - 1))
    return p.daily_amplitude * evening + p.morning_amplitude * morning


def synth_load(weeks=52, params=None, rng_seed=0, start=DEFAULT_START, location="synthetic"):
    """Seeded synthetic household load, strictly positive.

    With ``noise_amplitude = 0`` and ``spike_rate = 0`` the series is exactly
    168-periodic, and 24-periodic when also ``weekly_amplitude = 0`` and
    ``weekend_factor = 1``.
    """
    p = params or SynthParams()
    if weeks < 1:
        raise ValueError("weeks must be >= 1")
    n = weeks * HOURS_PER_WEEK
    hours = np.arange(n, dtype=float)
    day = (hours // 24).astype(int) % 7
    weekend = day >= 5
    daily = _profile(hours, p)
    daily = np.where(weekend, p.weekend_factor * daily, daily)
    weekly = p.weekly_amplitude * np.sin(2 * np.pi * hours / HOURS_PER_WEEK)
    signal = p.base + daily + weekly
    rng = np.random.default_rng(rng_seed)
    if p.noise_amplitude > 0:
        eps = rng.standard_normal(n) * p.noise_amplitude
        ar = np.empty(n)
        ar[0] = eps[0] / math.sqrt(1 - p.noise_phi**2)
        for i in range(1, n):
            ar[i] = p.noise_phi * ar[i - 1] + eps[i]
        # noise grows with the daily component, giving heteroscedastic peaks
        scale = 1.0 + p.multiplicative_noise * daily / max(p.daily_amplitude, 1e-12)
        signal = signal + ar * scale
    if p.spike_rate > 0:
        occ = np.maximum(daily, 0.0) ** p.spike_occupancy
        rate = np.minimum(p.spike_rate * occ / max(occ.mean(), 1e-12), 1.0)
        starts = rng.random(n) < rate
        sizes = np.where(starts, rng.exponential(p.spike_size, n), 0.0)
        active = np.empty(n)
        active[0] = sizes[0]
        for i in range(1, n):
            active[i] = p.spike_persistence * active[i - 1] + sizes[i]
        signal = signal + active
    values = np.maximum(signal, p.floor)
    return LoadSeries(values, start, location)
