"""OHLCV panels: loading, labelling, Z-scoring, windowing and chronological splits."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# indicator order along the last axis of every panel/window
INDICATORS = ("open", "close", "high", "low", "volume")
OPEN, CLOSE, HIGH, LOW, VOLUME = range(5)
CSV_HEADER = ("date", "ticker", "open", "high", "low", "close", "volume")

LABEL_MODES = ("eq2_gamma", "close_vs_open")


class DataError(ValueError):
    """Input data cannot produce a usable panel or sample set."""


class ParseError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True)
class StockPanel:
    tickers: tuple[str, ...]
    dates: tuple[dt.date, ...]
    values: np.ndarray  # (N, T, 5) in INDICATORS order
    dropped: tuple[str, ...] = ()

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def close(self) -> np.ndarray:
        return self.values[:, :, CLOSE]

    def validate(self) -> None:
        v = self.values
        if v.shape != (len(self.tickers), len(self.dates), len(INDICATORS)):
            raise DataError(f"panel values shape {v.shape} inconsistent with tickers/dates")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("panel dates must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise DataError("panel contains non-finite values")
        prices = v[:, :, :4]
        if np.any(prices <= 0):
            raise DataError("prices must be positive")
        if np.any(v[:, :, VOLUME] < 0):
            raise DataError("volume must be non-negative")
        hi, lo = v[:, :, HIGH], v[:, :, LOW]
        top = np.maximum(v[:, :, OPEN], v[:, :, CLOSE])
        bottom = np.minimum(v[:, :, OPEN], v[:, :, CLOSE])
        if np.any(hi < top) or np.any(lo > bottom):
            raise DataError("high/low do not bracket open/close")


@dataclass(frozen=True)
class WindowSample:
    window: np.ndarray  # (N, L, D) normalized
    labels: np.ndarray  # (N,) in {0, 1}
    anchor_date: dt.date
    anchor_index: int  # panel day index of the window's last day


@dataclass
class NormStats:
    tickers: tuple[str, ...]
    mean: np.ndarray  # (N, D)
    std: np.ndarray  # (N, D)

    def to_json(self) -> dict:
        return {
            t: {
                name: {"mean": float(self.mean[i, j]), "std": float(self.std[i, j])}
                for j, name in enumerate(INDICATORS)
            }
            for i, t in enumerate(self.tickers)
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        tickers = tuple(obj)
        mean = np.array([[obj[t][k]["mean"] for k in INDICATORS] for t in tickers])
        std = np.array([[obj[t][k]["std"] for k in INDICATORS] for t in tickers])
        return cls(tickers, mean, std)


# ---------------------------------------------------------------- csv io


def load_panel(path) -> StockPanel:
    """Read a long-format OHLCV CSV; tickers missing any date are dropped."""
    path = Path(path)
    rows: dict[str, dict[dt.date, tuple]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != CSV_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(path, lineno, f"expected 7 fields, got {len(row)}")
            try:
                day = dt.date.fromisoformat(row[0].strip())
            except ValueError:
                raise ParseError(path, lineno, f"bad date {row[0]!r}") from None
            ticker = row[1].strip()
            if not ticker:
                raise ParseError(path, lineno, "empty ticker")
            try:
                o, h, lo, c, vol = (float(x) for x in row[2:])
            except ValueError:
                raise ParseError(path, lineno, "non-numeric price or volume") from None
            if not all(math.isfinite(x) for x in (o, h, lo, c, vol)):
                raise ParseError(path, lineno, "non-finite value")
            if min(o, h, lo, c) <= 0:
                raise ParseError(path, lineno, "prices must be positive")
            if vol < 0:
                raise ParseError(path, lineno, "volume must be non-negative")
            if h < max(o, c) or lo > min(o, c):
                raise ParseError(path, lineno, "high/low do not bracket open/close")
            per_ticker = rows.setdefault(ticker, {})
            if day in per_ticker:
                raise ParseError(path, lineno, f"duplicate row for {ticker} on {day}")
            per_ticker[day] = (o, c, h, lo, vol)

    if not rows:
        raise DataError(f"{path}: no data rows")
    all_dates = sorted(set().union(*(r.keys() for r in rows.values())))
    complete = sorted(t for t, r in rows.items() if len(r) == len(all_dates))
    dropped = tuple(sorted(set(rows) - set(complete)))
    if dropped:
        logger.warning("dropping %d ticker(s) with incomplete records: %s", len(dropped), ", ".join(dropped))
    if not complete:
        raise DataError(f"{path}: no ticker covers every date")
    values = np.array([[rows[t][d] for d in all_dates] for t in complete], dtype=np.float64)
    panel = StockPanel(tuple(complete), tuple(all_dates), values, dropped)
    panel.validate()
    return panel


def write_panel(panel: StockPanel, path) -> None:
    # repr() round-trips floats exactly
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t_idx, day in enumerate(panel.dates):
            for s_idx, ticker in enumerate(panel.tickers):
                o, c, h, lo, vol = panel.values[s_idx, t_idx]
                w.writerow([day.isoformat(), ticker, *(repr(float(v)) for v in (o, h, lo, c, vol))])


# ---------------------------------------------------------------- labels


def make_labels(panel: StockPanel, gamma: float = 0.005, mode: str = "eq2_gamma") -> np.ndarray:
    """Next-day movement labels, shape ``(N, T-1)``; column ``t-1`` labels day ``t``.

    ``eq2_gamma``: up iff the close-to-close return reaches ``gamma``.
    ``close_vs_open``: up iff the day closes above its open.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    close = panel.values[:, :, CLOSE]
    if mode == "eq2_gamma":
        ret = (close[:, 1:] - close[:, :-1]) / close[:, :-1]
        return (ret >= gamma).astype(np.int64)
    if mode == "close_vs_open":
        return (close[:, 1:] > panel.values[:, 1:, OPEN]).astype(np.int64)
    raise ValueError(f"unknown label mode {mode!r}; expected one of {LABEL_MODES}")


# ---------------------------------------------------------------- normalization


def zscore_normalize(panel: StockPanel, stats_range: tuple[int, int]) -> tuple[np.ndarray, NormStats]:
    """Z-score every day using per-(stock, indicator) stats from days ``[lo, hi)`` only."""
    lo, hi = stats_range
    if not 0 <= lo < hi <= panel.n_days:
        raise DataError(f"bad stats range {stats_range} for {panel.n_days} days")
    ref = panel.values[:, lo:hi, :]
    stats = NormStats(panel.tickers, ref.mean(axis=1), ref.std(axis=1))
    return apply_stats(panel.values, stats), stats


def apply_stats(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.mean[:, None, :]) / np.maximum(stats.std, 1e-8)[:, None, :]


def save_stats(stats: NormStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_json(), indent=2, sort_keys=True))


def load_stats(path) -> NormStats:
    return NormStats.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- windows and splits


def make_windows(values: np.ndarray, labels: np.ndarray, dates, window: int) -> list[WindowSample]:
    """Stride-1 windows; sample ``m`` spans days ``[m, m+L)`` and is labelled by day ``m+L``."""
    n_days = values.shape[1]
    if n_days <= window:
        raise DataError(f"need more than {window} days for windows of length {window}, got {n_days}")
    return [
        WindowSample(
            window=values[:, m : m + window, :],
            labels=labels[:, m + window - 1],
            anchor_date=dates[m + window - 1],
            anchor_index=m + window - 1,
        )
        for m in range(n_days - window)
    ]


def split_sizes(n: int, fractions=(0.75, 0.125, 0.125)) -> tuple[int, int, int]:
    if len(fractions) != 3 or abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three values summing to 1, got {fractions}")
    n_train = math.floor(n * fractions[0])
    n_val = math.floor(n * fractions[1])
    return n_train, n_val, n - n_train - n_val


def chronological_split(samples, fractions=(0.75, 0.125, 0.125)):
    """Contiguous train/val/test partitions, floor sizes with the remainder going to test."""
    n_train, n_val, n_test = split_sizes(len(samples), fractions)
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{len(samples)} samples cannot fill every split (sizes {n_train}/{n_val}/{n_test})")
    return (
        list(samples[:n_train]),
        list(samples[n_train : n_train + n_val]),
        list(samples[n_train + n_val :]),
    )


@dataclass
class Dataset:
    panel: StockPanel
    stats: NormStats
    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]
    window: int
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[WindowSample]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


def prepare_dataset(
    panel: StockPanel,
    window: int,
    gamma: float = 0.005,
    label_mode: str = "eq2_gamma",
    fractions=(0.75, 0.125, 0.125),
) -> Dataset:
    """Label, normalize on the training windows' days, window and split a panel."""
    labels = make_labels(panel, gamma, label_mode)
    n_samples = panel.n_days - window
    if n_samples < 1:
        raise DataError(f"need more than {window} days, got {panel.n_days}")
    n_train, _, _ = split_sizes(n_samples, fractions)
    if n_train < 1:
        raise DataError(f"{n_samples} samples leave no training windows")
    # input days touched by training windows: [0, n_train + L - 1)
    normed, stats = zscore_normalize(panel, (0, n_train + window - 1))
    samples = make_windows(normed, labels, panel.dates, window)
    train, val, test = chronological_split(samples, fractions)
    return Dataset(panel, stats, train, val, test, window)


def stack_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    """``(B, N, L, D)`` windows and ``(B, N)`` labels."""
    return np.stack([s.window for s in samples]), np.stack([s.labels for s in samples])


# ---------------------------------------------------------------- synthetic data


def synthetic_panel(
    n_stocks: int = 20,
    n_days: int = 600,
    seed: int = 0,
    n_groups: int = 1,
    short: int = 2,
    long: int = 8,
    coupling: float = 1.0,
    move: tuple[float, float] = (0.006, 0.03),
    start: dt.date = dt.date(2020, 1, 1),
) -> StockPanel:
    """Panel whose next-day direction is a fixed function of the visible history.

    For each stock the score is the gap between its long and short moving
    averages of close (relative to price), plus ``coupling`` times the mean gap
    of its group. A positive score makes the next close rise by a fraction
    drawn from ``move``, otherwise it falls by the same kind of draw; with
    ``move[0] > 0.005`` the close-to-close label at gamma=0.005 is exactly
    ``score > 0``.
    """
    rng = np.random.default_rng(seed)
    groups = np.arange(n_stocks) % n_groups
    close = np.empty((n_stocks, n_days))
    close[:, :long] = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.01, (n_stocks, long)), axis=1))
    close[:, :long] *= rng.uniform(0.5, 2.0, (n_stocks, 1))
    for t in range(long - 1, n_days - 1):
        hist = close[:, t - long + 1 : t + 1]
        gap = (hist.mean(axis=1) - hist[:, -short:].mean(axis=1)) / hist[:, -1]
        group_gap = np.array([gap[groups == g].mean() for g in groups])
        score = gap + coupling * group_gap
        up = score > 0
        size = rng.uniform(move[0], move[1], n_stocks) * np.where(up, 1.0, -1.0)
        close[:, t + 1] = close[:, t] * (1.0 + size)
    prev = np.concatenate([close[:, :1], close[:, :-1]], axis=1)
    open_ = prev * (1.0 + rng.normal(0, 0.003, close.shape))
    high = np.maximum(open_, close) * (1.0 + np.abs(rng.normal(0, 0.004, close.shape)))
    low = np.minimum(open_, close) * (1.0 - np.abs(rng.normal(0, 0.004, close.shape)))
    ret = np.abs(close / prev - 1.0)
    volume = 1e6 * (1.0 + 20.0 * ret) * rng.lognormal(0, 0.1, close.shape)
    values = np.stack([open_, close, high, low, volume], axis=-1)
    dates = tuple(start + dt.timedelta(days=i) for i in range(n_days))
    tickers = tuple(f"S{i:03d}" for i in range(n_stocks))
    panel = StockPanel(tickers, dates, values)
    panel.validate()
    return panel
