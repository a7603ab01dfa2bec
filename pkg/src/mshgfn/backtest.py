"""Daily top-k long-only backtest driven by next-day "up" probabilities."""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLOSE, DataError, StockPanel

INITIAL_CAPITAL = 10_000_000.0


@dataclass
class BacktestConfig:
    top_k: int = 5
    initial_capital: float = INITIAL_CAPITAL
    cost_bps: float = 0.0  # per side, on traded notional


@dataclass
class PortfolioState:
    cash: float
    holdings: dict[str, float] = field(default_factory=dict)
    history: list[tuple[dt.date, float]] = field(default_factory=list)

    def value(self, prices: dict[str, float]) -> float:
        return self.cash + sum(shares * prices[t] for t, shares in self.holdings.items())


@dataclass
class EquityCurve:
    dates: list[dt.date]
    values: np.ndarray
    selections: list[list[str]]

    def returns(self) -> np.ndarray:
        return self.values[1:] / self.values[:-1] - 1.0

    def max_drawdown(self) -> float:
        peak = np.maximum.accumulate(self.values)
        return float(np.max(1.0 - self.values / peak))

    def summary(self) -> dict:
        r = self.returns()
        return {
            "start_date": self.dates[0].isoformat(),
            "end_date": self.dates[-1].isoformat(),
            "initial_value": float(self.values[0]),
            "final_value": float(self.values[-1]),
            "total_return": float(self.values[-1] / self.values[0] - 1.0),
            "max_drawdown": self.max_drawdown(),
            "daily_return_mean": float(r.mean()) if r.size else 0.0,
            "daily_return_std": float(r.std()) if r.size else 0.0,
            "n_days": len(self.dates) - 1,
        }

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "value"])
            for d, v in zip(self.dates, self.values):
                w.writerow([d.isoformat(), repr(float(v))])

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def select_top_k(prob_up: dict[str, float], k: int = 5) -> list[str]:
    """The ``k`` tickers with the highest probability; ties go to the lexicographically smaller ticker."""
    if len(prob_up) < k:
        raise ValueError(f"need at least {k} tickers with predictions, got {len(prob_up)}")
    return sorted(prob_up, key=lambda t: (-prob_up[t], t))[:k]


def run_backtest(
    predictions: dict[dt.date, dict[str, float]],
    panel: StockPanel,
    config: BacktestConfig | None = None,
) -> EquityCurve:
    """Rebalance at every prediction date's close into the top-k names, equal weight.

    The curve starts at the first prediction date with the initial capital; each
    following point marks the portfolio at the next trading day's close.
    """
    config = config or BacktestConfig()
    index = {d: i for i, d in enumerate(panel.dates)}
    days = sorted(predictions)
    if not days:
        raise DataError("no predictions to backtest")
    for d in days:
        if d not in index:
            raise DataError(f"prediction date {d.isoformat()} is not a panel trading day")
        if index[d] + 1 >= panel.n_days:
            raise DataError(f"prediction date {d.isoformat()} has no following trading day")
        unknown = set(predictions[d]) - set(panel.tickers)
        if unknown:
            raise DataError(f"prediction date {d.isoformat()} names unknown tickers {sorted(unknown)}")
    close = panel.values[:, :, CLOSE]
    col = {t: j for j, t in enumerate(panel.tickers)}
    fee = config.cost_bps / 1e4

    state = PortfolioState(cash=config.initial_capital)
    state.history.append((days[0], state.cash))
    selections = []
    for d in days:
        t = index[d]
        prices = {tk: close[col[tk], t] for tk in panel.tickers}
        # liquidate at today's close
        proceeds = sum(shares * prices[tk] for tk, shares in state.holdings.items())
        state.cash += proceeds * (1.0 - fee)
        state.holdings = {}
        picks = select_top_k(predictions[d], config.top_k)
        selections.append(picks)
        budget = state.cash / (1.0 + fee)
        per_name = budget / len(picks)
        for tk in picks:
            state.holdings[tk] = per_name / prices[tk]
        state.cash -= budget * (1.0 + fee)
        nxt = panel.dates[t + 1]
        next_prices = {tk: close[col[tk], t + 1] for tk in state.holdings}
        state.history.append((nxt, state.value(next_prices)))
    dates = [d for d, _ in state.history]
    values = np.array([v for _, v in state.history])
    return EquityCurve(dates, values, selections)


def predictions_from_array(samples, prob: np.ndarray, tickers) -> dict[dt.date, dict[str, float]]:
    """Key per-window probabilities ``(n_samples, N)`` by each window's anchor date."""
    return {s.anchor_date: dict(zip(tickers, map(float, row))) for s, row in zip(samples, prob)}


def equal_weight_benchmark(panel: StockPanel, days, initial_capital: float = INITIAL_CAPITAL) -> EquityCurve:
    """Daily-rebalanced equal weight over every ticker on the same dates as a backtest."""
    preds = {d: {t: 1.0 for t in panel.tickers} for d in days}
    return run_backtest(preds, panel, BacktestConfig(top_k=panel.n_stocks, initial_capital=initial_capital))


def perfect_foresight(panel: StockPanel, days) -> dict[dt.date, dict[str, float]]:
    """Predictions equal to each name's realized next-day return."""
    index = {d: i for i, d in enumerate(panel.dates)}
    close = panel.values[:, :, CLOSE]
    out = {}
    for d in days:
        t = index[d]
        ret = close[:, t + 1] / close[:, t] - 1.0
        out[d] = dict(zip(panel.tickers, map(float, ret)))
    return out
