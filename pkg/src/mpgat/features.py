"""Raw series ingestion, multivariate windowing, normalisation and synthetic data.

Feature order is fixed: ``[X_q, X_ma5, X_ma20, X_d]`` (recent counts, two
trailing moving averages, same time-of-day on preceding days).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from . import kernels
from .graph import IntersectionGraph, path_graph

STEPS_PER_DAY = 288
STEP = timedelta(minutes=5)
FEATURES = ("q", "ma5", "ma20", "d")
MA_WINDOWS = (5, 20)
CACHE_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    counts: np.ndarray  # (T_total, N)
    steps_per_day: int = STEPS_PER_DAY
    start: datetime | None = None
    node_ids: tuple = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2:
            raise DataError(f"counts must be (T, N), got shape {self.counts.shape}")
        if np.any(self.counts < 0) or not np.all(np.isfinite(self.counts)):
            raise DataError("counts must be finite and nonnegative")
        if not self.node_ids:
            self.node_ids = tuple(str(i) for i in range(self.n_nodes))

    @property
    def n_nodes(self):
        return self.counts.shape[1]

    @property
    def n_steps(self):
        return self.counts.shape[0]

    def timestamp(self, index):
        start = self.start or datetime(2020, 1, 1)
        return start + index * STEP

    def index_of(self, ts):
        start = self.start or datetime(2020, 1, 1)
        delta = pd.Timestamp(ts).to_pydatetime() - start
        idx, rem = divmod(delta, STEP)
        if rem:
            raise DataError(f"{ts} is not on the 5-minute grid starting at {start}")
        return int(idx)

    def write_csv(self, path):
        lines = ["timestamp,node_id,count"]
        for t in range(self.n_steps):
            stamp = self.timestamp(t).isoformat()
            for n, node in enumerate(self.node_ids):
                lines.append(f"{stamp},{node},{self.counts[t, n]:.4f}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class MultivariateSample:
    x: np.ndarray  # (F, N, T_in)
    y: np.ndarray  # (N, T_out)
    t0_index: int


def ingest_csv(path, node_ids=None, steps_per_day=STEPS_PER_DAY):
    """Read ``timestamp,node_id,count`` rows into a dense (T, N) series.

    The rows must tile a complete 5-minute grid; a gap raises with the first
    missing timestamp.  ``node_ids`` fixes the column order and rejects
    unknown ids; otherwise ids are sorted.
    """
    try:
        df = pd.read_csv(path, dtype={"node_id": str})
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    missing = {"timestamp", "node_id", "count"} - set(df.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    if df.empty:
        raise DataError(f"{path}: no rows")
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    dup = df.duplicated(["timestamp", "node_id"])
    if dup.any():
        row = df[dup].iloc[0]
        raise DataError(f"duplicate row for timestamp {row.timestamp.isoformat()} node {row.node_id}")

    ids = sorted(df["node_id"].unique(), key=_id_key) if node_ids is None else [str(n) for n in node_ids]
    unknown = set(df["node_id"]) - set(ids)
    if unknown:
        raise DataError(f"unknown node_id(s): {sorted(unknown)}")

    start, stop = df["timestamp"].min(), df["timestamp"].max()
    grid = pd.date_range(start, stop, freq="5min")
    wide = df.pivot(index="timestamp", columns="node_id", values="count")
    wide = wide.reindex(index=grid, columns=ids)
    holes = wide.isna().to_numpy()
    if holes.any():
        t, n = np.argwhere(holes)[0]
        raise DataError(f"gap in 5-minute grid: first missing timestamp {grid[t].isoformat()} (node {ids[n]})")
    return RawSeries(wide.to_numpy(dtype=np.float64), steps_per_day, start.to_pydatetime(), tuple(ids))


def _id_key(s):
    return (0, int(s), "") if str(s).isdigit() else (1, 0, str(s))


def moving_average(series, window):
    """Trailing mean over ``window`` steps; rows t < window-1 are NaN (invalid)."""
    if window < 1:
        raise ValueError("moving-average window must be >= 1")
    counts = series.counts if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    if counts.ndim == 1:
        return kernels.moving_average(np.ascontiguousarray(counts[:, None]), window)[:, 0]
    return kernels.moving_average(np.ascontiguousarray(counts), window)


def daily_feature(series, t0, t_in):
    """Counts at the time-of-day of ``t0`` on the ``t_in - 1`` preceding days, then t0. Shape (T_in, N)."""
    p = series.steps_per_day
    first = t0 - (t_in - 1) * p
    if first < 0:
        raise DataError(f"t0={t0} lacks {t_in - 1} days of history")
    return series.counts[first : t0 + 1 : p]


def sample_range(series, t_in, t_out, ma_windows=MA_WINDOWS):
    """Inclusive (earliest, latest) t0 for which every feature and the target exist."""
    p = series.steps_per_day
    earliest = max((t_in - 1) * p, t_in - 1 + max(ma_windows) - 1)
    latest = series.n_steps - 1 - t_out
    return earliest, latest


def build_sample_arrays(series, t_in, t_out, ma_windows=MA_WINDOWS):
    """Vectorised windowing: returns ``x (S, F, N, T_in)``, ``y (S, N, T_out)``, ``t0 (S,)``."""
    if t_in < 1 or t_out < 1:
        raise ValueError("t_in and t_out must be >= 1")
    earliest, latest = sample_range(series, t_in, t_out, ma_windows)
    if latest < earliest:
        raise DataError(
            f"series of {series.n_steps} steps is too short for any sample "
            f"(need t0 in [{earliest}, {latest}])"
        )
    p = series.steps_per_day
    t0 = np.arange(earliest, latest + 1)
    back = np.arange(-t_in + 1, 1)
    recent = t0[:, None] + back
    channels = [series.counts[recent]]
    for w in ma_windows:
        channels.append(moving_average(series, w)[recent])
    daily = t0[:, None] - (t_in - 1 - np.arange(t_in)) * p
    channels.append(series.counts[daily])
    # each channel is (S, T_in, N) -> stack to (S, F, N, T_in)
    x = np.stack([c.transpose(0, 2, 1) for c in channels], axis=1)
    y = series.counts[t0[:, None] + np.arange(1, t_out + 1)].transpose(0, 2, 1)
    return np.ascontiguousarray(x), np.ascontiguousarray(y), t0


def build_samples(series, t_in, t_out, ma_windows=MA_WINDOWS):
    x, y, t0 = build_sample_arrays(series, t_in, t_out, ma_windows)
    return [MultivariateSample(x[i], y[i], int(t0[i])) for i in range(len(t0))]


def stack_samples(samples):
    return (
        np.stack([s.x for s in samples]),
        np.stack([s.y for s in samples]),
        np.array([s.t0_index for s in samples]),
    )


def split_sizes(total, ratios=(0.7, 0.1, 0.2)):
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three numbers summing to 1, got {ratios}")
    n_train = math.floor(ratios[0] * total + 1e-9)
    n_val = math.floor(ratios[1] * total + 1e-9)
    n_test = total - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"split of {total} samples leaves an empty partition ({n_train}/{n_val}/{n_test})")
    return n_train, n_val, n_test


def split(samples, ratios=(0.7, 0.1, 0.2)):
    """Chronological train/val/test split (no shuffling); remainder goes to test."""
    order = sorted(range(len(samples)), key=lambda i: _t0(samples[i]))
    ordered = [samples[i] for i in order]
    n_train, n_val, _ = split_sizes(len(ordered), ratios)
    return ordered[:n_train], ordered[n_train : n_train + n_val], ordered[n_train + n_val :]


def _t0(s):
    return s.t0_index


@dataclass
class Normalizer:
    mean: np.ndarray  # (N,)
    std: np.ndarray  # (N,)

    @classmethod
    def fit(cls, x, t0):
        """Per-node z-score statistics from the X_q channel of training samples.

        Overlapping windows are de-duplicated so every training time step
        counts once.
        """
        x = np.asarray(x)
        t0 = np.asarray(t0)
        t_in = x.shape[-1]
        times = (t0[:, None] + np.arange(-t_in + 1, 1)).reshape(-1)
        values = x[:, 0].transpose(0, 2, 1).reshape(-1, x.shape[2])  # (S*T_in, N)
        _, first = np.unique(times, return_index=True)
        values = values[first]
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        if np.any(std <= 0):
            bad = np.flatnonzero(std <= 0).tolist()
            raise DataError(f"zero variance on training data for node(s) {bad}")
        return cls(mean, std)

    @classmethod
    def fit_samples(cls, samples):
        x, _, t0 = stack_samples(samples)
        return cls.fit(x, t0)

    def normalize(self, a):
        """Works on any array whose last two axes are (N, T)."""
        return (np.asarray(a) - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, a):
        return np.asarray(a) * self.std[:, None] + self.mean[:, None]

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, doc):
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64))


def select_features(x, n_features):
    """Keep the first ``n_features`` channels; 1 gives the X_q-only input."""
    if not 1 <= n_features <= x.shape[1]:
        raise ValueError(f"n_features must be in [1, {x.shape[1]}]")
    return x[:, :n_features]


# ---------------------------------------------------------------------------
# prepared-sample cache
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    x: np.ndarray
    y: np.ndarray
    t0: np.ndarray
    sizes: tuple
    normalizer: Normalizer
    t_in: int
    t_out: int
    steps_per_day: int = STEPS_PER_DAY
    start: datetime | None = None
    node_ids: tuple = ()

    def part(self, name):
        n_train, n_val, _ = self.sizes
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, len(self.t0))}
        lo, hi = bounds[name]
        return self.x[lo:hi], self.y[lo:hi], self.t0[lo:hi]

    def meta(self):
        return {
            "version": CACHE_VERSION,
            "features": list(FEATURES),
            "t_in": self.t_in,
            "t_out": self.t_out,
            "steps_per_day": self.steps_per_day,
            "start": self.start.isoformat() if self.start else None,
            "node_ids": list(self.node_ids),
            "sizes": list(self.sizes),
            "normalizer": self.normalizer.to_json(),
        }

    def save(self, path):
        with open(path, "wb") as fh:
            np.savez(fh, x=self.x, y=self.y, t0=self.t0, meta=np.array(json.dumps(self.meta())))

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CACHE_VERSION:
                raise DataError(f"{path}: unsupported cache version {meta.get('version')}")
            if tuple(meta["features"]) != FEATURES:
                raise DataError(f"{path}: unexpected feature order {meta['features']}")
            return cls(
                z["x"], z["y"], z["t0"], tuple(meta["sizes"]), Normalizer.from_json(meta["normalizer"]),
                meta["t_in"], meta["t_out"], meta["steps_per_day"],
                datetime.fromisoformat(meta["start"]) if meta["start"] else None, tuple(meta["node_ids"]),
            )


def prepare(series, t_in=12, t_out=12, ratios=(0.7, 0.1, 0.2)):
    """Window, split chronologically and fit the normaliser on the train part."""
    x, y, t0 = build_sample_arrays(series, t_in, t_out)
    sizes = split_sizes(len(t0), ratios)
    norm = Normalizer.fit(x[: sizes[0]], t0[: sizes[0]])
    return PreparedData(x, y, t0, sizes, norm, t_in, t_out, series.steps_per_day, series.start, series.node_ids)


# ---------------------------------------------------------------------------
# synthetic diurnal traffic
# ---------------------------------------------------------------------------


def _diurnal(t, p, phase):
    theta = 2.0 * np.pi * (t / p - phase)
    # trough at theta=0, peak pushed into the evening by the second harmonic
    return 0.5 * (1.0 - np.cos(theta)) + 0.12 * np.sin(2.0 * theta)


def synth_generate(n_nodes=6, days=14, peak_ratio=200.0, noise_level=0.2, seed=0,
                   steps_per_day=STEPS_PER_DAY, coupling=0.4, lag=3):
    """Generate a seeded diurnal count series plus the directed path graph coupling it.

    Each node has a smooth daily profile affinely scaled to ``max/min ==
    peak_ratio``.  Node ``i`` mixes in node ``i-1``'s profile and slow noise
    delayed by ``lag`` steps, so information flows along edges ``i-1 -> i``.
    Noise is multiplicative: a slow log-AR(1) field plus i.i.d. jitter, both
    scaled by ``noise_level``.  With ``noise_level == 0`` the series is exactly
    the rescaled profile.
    """
    if days < 2:
        raise ValueError("need at least two days")
    if peak_ratio <= 1:
        raise ValueError("peak_ratio must exceed 1")
    rng = np.random.default_rng(seed)
    p = steps_per_day
    steps = days * p
    t = np.arange(steps, dtype=np.float64)

    phases = 3.0 / 24.0 + rng.uniform(-0.02, 0.02, n_nodes)
    floors = rng.uniform(3.0, 8.0, n_nodes)

    own = np.stack([_diurnal(t, p, ph) for ph in phases], axis=1)
    clean = np.empty_like(own)
    clean[:, 0] = own[:, 0]
    for i in range(1, n_nodes):
        clean[:, i] = (1.0 - coupling) * own[:, i] + coupling * _lagged(clean[:, i - 1], lag)
    lo, hi = clean.min(axis=0), clean.max(axis=0)
    clean = floors * (1.0 + (peak_ratio - 1.0) * (clean - lo) / (hi - lo))

    if noise_level > 0:
        ar = 0.98
        innov = noise_level * 0.5 * math.sqrt(1.0 - ar * ar)
        eps = rng.standard_normal((steps, n_nodes)) * innov
        slow = np.empty_like(eps)
        slow[0] = rng.standard_normal(n_nodes) * noise_level * 0.5
        for k in range(1, steps):
            slow[k] = ar * slow[k - 1] + eps[k]
        field = np.exp(slow)
        for i in range(1, n_nodes):
            field[:, i] = (1.0 - coupling) * field[:, i] + coupling * _lagged(field[:, i - 1], lag)
        jitter = np.exp(noise_level * rng.standard_normal((steps, n_nodes)) - 0.5 * noise_level**2)
        counts = clean * field * jitter
    else:
        counts = clean

    series = RawSeries(counts, p, datetime(2020, 1, 1), tuple(str(i) for i in range(n_nodes)))
    return series, path_graph(n_nodes)


def _lagged(col, lag):
    if lag <= 0:
        return col
    return np.concatenate([np.full(lag, col[0]), col[:-lag]])


def autocorrelation(x, lag):
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    return float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))
