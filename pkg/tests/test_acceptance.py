"""Acceptance criteria 1 to 9; each records one PASS/FAIL line, listed in the terminal summary.

Criteria 4 and 5 train ten models on the synthetic coupled panel and take
tens of minutes on one core.
"""

import datetime as dt
import itertools
import time

import numpy as np
import pytest

from mshgfn import autodiff as ad
from mshgfn.backtest import equal_weight_benchmark, perfect_foresight, run_backtest
from mshgfn.cli import main
from mshgfn.data import StockPanel, make_labels, prepare_dataset, synthetic_panel, write_panel
from mshgfn.evaluation import accuracy, evaluate, mcc
from mshgfn.gradcheck import TINY, run_gradcheck
from mshgfn.model import MSHGFN, ForwardTrace, ModelConfig
from mshgfn.training import TrainConfig, fit

SEEDS = (0, 1, 2, 3, 4)
# synthetic task: N=20, T=600, market-wide coupling of the crossover signal
PANEL = dict(n_stocks=20, n_days=600, n_groups=1, coupling=1.0)
PAPER_HYPER = dict(learning_rate=1e-4, batch_size=32, dropout=0.5, epochs=50)
WIDE = dict(model_dim=64, heads=4)


def report(record_property, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    print("\n" + line)
    record_property("criterion", line)
    assert ok, detail


def check_invariants(model, x):
    trace = ForwardTrace()
    model.forward(x, trace=trace)
    cfg = model.cfg
    bad = []
    if [lv.shape[-2] for lv in trace.pyramid] != cfg.lengths:
        bad.append("pyramid lengths")
    for r, a, a_hat in zip(trace.attribute_adjacency, trace.raw_adjacency, trace.norm_adjacency):
        if np.max(np.abs(r.data.sum(-1) - 1.0)) >= 1e-9:
            bad.append("R rows")
        a = a.data
        if np.max(np.abs(a - np.swapaxes(a, -1, -2))) >= 1e-9:
            bad.append("A symmetry")
        if np.max(np.abs(np.diagonal(a, axis1=-2, axis2=-1) - 1.0)) >= 1e-9:
            bad.append("A diagonal")
        if np.any(a < -1.0) or np.any(a > 1.0):
            bad.append("A range")
        if np.max(np.abs(a_hat.data.sum(-1) - 1.0)) >= 1e-9:
            bad.append("normalized rows")
    if not all(np.all((g.data > 0) & (g.data < 1)) for g in trace.gates):
        bad.append("gate range")
    if np.max(np.abs(ad.softmax(trace.logits).data.sum(-1) - 1.0)) >= 1e-9:
        bad.append("prediction rows")
    if trace.fused.shape[-2:] != (cfg.n_stocks, cfg.dim):
        bad.append("P1 shape")
    return bad


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_correctness(record_property):
    start = time.perf_counter()
    errors = run_gradcheck(TINY, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    report(record_property, 1, worst < 1e-4 and elapsed < 60, f"max rel err {worst:.2e} over {len(errors)} groups, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_shape_and_invariants(record_property):
    start = time.perf_counter()
    cfg = ModelConfig(n_stocks=8, window=16, n_scales=3)
    x = np.random.default_rng(0).normal(size=(4, 8, 16, 5))
    bad = check_invariants(MSHGFN(cfg, seed=0), x)
    elapsed = time.perf_counter() - start
    report(record_property, 2, not bad and elapsed < 10, f"violations {bad or 'none'}, {elapsed:.2f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_oracle_equivalence(record_property):
    rng = np.random.default_rng(3)
    worst_metric = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        p, y = rng.integers(0, 2, n), rng.integers(0, 2, n)
        tp = sum(int(a == 1 and b == 1) for a, b in zip(p, y))
        tn = sum(int(a == 0 and b == 0) for a, b in zip(p, y))
        fp = sum(int(a == 1 and b == 0) for a, b in zip(p, y))
        fn = n - tp - tn - fp
        d = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        ref_mcc = 0.0 if d == 0 else (tp * tn - fp * fn) / d**0.5
        worst_metric = max(worst_metric, abs(mcc(p, y) - ref_mcc), abs(accuracy(p, y) - (tp + tn) / n))
    worst_op = 0.0
    for _ in range(100):
        m, k, n = (int(v) for v in rng.integers(1, 6, 3))
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        loop = np.array([[sum(a[i, t] * b[t, j] for t in range(k)) for j in range(n)] for i in range(m)])
        worst_op = max(worst_op, np.max(np.abs(ad.matmul(ad.tensor(a), ad.tensor(b)).data - loop)))
        row = rng.normal(size=n)
        mx = max(row)
        ex = [float(np.exp(v - mx)) for v in row]
        worst_op = max(worst_op, np.max(np.abs(ad.softmax(ad.tensor(row)).data - np.array(ex) / sum(ex))))
        g, bias = rng.normal(size=n), rng.normal(size=n)
        mu = sum(row) / n
        var = sum((v - mu) ** 2 for v in row) / n
        ln = [(v - mu) / (var + 1e-5) ** 0.5 * gi + bi for v, gi, bi in zip(row, g, bias)]
        worst_op = max(worst_op, np.max(np.abs(ad.layer_norm(ad.tensor(row), g, bias).data - np.array(ln))))
    ok = worst_metric <= 1e-12 and worst_op <= 1e-12
    report(record_property, 3, ok, f"metric err {worst_metric:.1e}, op err {worst_op:.1e}")


# ---------------------------------------------------------------- 4 and 5


@pytest.fixture(scope="module")
def synthetic_runs():
    runs = {}
    for seed, variant in itertools.product(SEEDS, ("none", "no_features_sr")):
        ds = prepare_dataset(synthetic_panel(seed=seed, **PANEL), 16)
        cfg = TrainConfig(seed=seed, ablation=variant, **PAPER_HYPER, **WIDE)
        start = time.perf_counter()
        res = fit(ds.train, ds.val, cfg)
        runs[seed, variant] = (evaluate(res.model, ds.test).acc, time.perf_counter() - start)
    return runs


def test_criterion_4_synthetic_learnability(record_property, synthetic_runs):
    accs = [synthetic_runs[s, "none"][0] for s in SEEDS]
    slowest = max(synthetic_runs[s, "none"][1] for s in SEEDS)
    hits = sum(a >= 0.85 for a in accs)
    detail = f"test ACC {[round(a, 4) for a in accs]}, {hits}/5 >= 0.85, slowest {slowest:.0f}s"
    report(record_property, 4, hits >= 4 and slowest < 600, detail)


def test_criterion_5_ablation_ordering(record_property, synthetic_runs):
    full = float(np.mean([synthetic_runs[s, "none"][0] for s in SEEDS]))
    no_sr = float(np.mean([synthetic_runs[s, "no_features_sr"][0] for s in SEEDS]))
    report(record_property, 5, full >= no_sr, f"mean ACC full {full:.4f} vs no_features_sr {no_sr:.4f}")


# ---------------------------------------------------------------- 6


def test_criterion_6_determinism(record_property, tmp_path):
    data = tmp_path / "panel.csv"
    write_panel(synthetic_panel(n_stocks=6, n_days=120, seed=6), data)
    cfg = tmp_path / "run.json"
    cfg.write_text('{"epochs": 3, "L": 8, "K": 2, "batch_size": 16, "learning_rate": 0.001, "seed": 6}')
    losses, csvs = [], []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out / "m.json")]) == 0
        assert main(["eval", "--ckpt", str(out / "m.json"), "--data", str(data), "--out", str(out / "eval")]) == 0
        rows = (out / "m.log.csv").read_text().splitlines()[1:]
        losses.append(np.array([float(r.split(",")[1]) for r in rows]))
        csvs.append([(out / "eval" / f).read_bytes() for f in ("test_metrics.csv", "test_per_day.csv")])
    diff = float(np.max(np.abs(losses[0] - losses[1])))
    report(record_property, 6, diff <= 1e-12 and csvs[0] == csvs[1], f"loss diff {diff:.1e}, metric CSVs identical {csvs[0] == csvs[1]}")


# ---------------------------------------------------------------- 7


def _price_panel(close):
    n, t = close.shape
    values = np.stack([close, close, close * 1.01, close * 0.99, np.full((n, t), 1e5)], axis=-1)
    dates = tuple(dt.date(2023, 1, 2) + dt.timedelta(days=i) for i in range(t))
    return StockPanel(tuple(f"T{i:02d}" for i in range(n)), dates, values)


def test_criterion_7_backtest_accounting(record_property):
    rng = np.random.default_rng(7)

    def preds(panel):
        return {d: dict(zip(panel.tickers, rng.random(panel.n_stocks))) for d in panel.dates[:-1]}

    flat = _price_panel(np.full((10, 60), 25.0))
    flat_err = float(np.max(np.abs(run_backtest(preds(flat), flat).values - 1e7)))
    grow = _price_panel(30.0 * 1.01 ** np.arange(60)[None, :] * np.ones((10, 1)))
    curve = run_backtest(preds(grow), grow)
    grow_err = float(np.max(np.abs(curve.values / (1e7 * 1.01 ** np.arange(60)) - 1.0)))
    syn = synthetic_panel(n_stocks=20, n_days=600, seed=7)
    days = syn.dates[450:599]
    oracle = run_backtest(perfect_foresight(syn, days), syn).values[-1]
    bench = equal_weight_benchmark(syn, days).values[-1]
    ok = flat_err <= 1e-6 and grow_err <= 1e-4 and oracle > bench
    report(record_property, 7, ok, f"flat err {flat_err:.1e}, growth rel err {grow_err:.1e}, foresight {oracle:.4g} vs equal weight {bench:.4g}")


# ---------------------------------------------------------------- 8


def test_criterion_8_label_rule(record_property):
    def panel(close, opens):
        close, opens = np.asarray(close, float), np.asarray(opens, float)
        values = np.stack([opens, close, np.maximum(opens, close) * 1.01, np.minimum(opens, close) * 0.99, np.ones_like(close)], -1)
        dates = tuple(dt.date(2023, 1, 2) + dt.timedelta(days=i) for i in range(close.shape[1]))
        return StockPanel(tuple(f"T{i}" for i in range(close.shape[0])), dates, values)

    boundary = make_labels(panel([[200.0, 201.0]], [[200.0, 201.0]]), 0.005)
    fixture = panel([[100.0, 101.0, 100.5]], [[100.0, 102.0, 100.0]])
    eq2 = make_labels(fixture, 0.005, "eq2_gamma").tolist()
    alt = make_labels(fixture, 0.005, "close_vs_open").tolist()
    ok = boundary.tolist() == [[1]] and eq2 == [[1, 0]] and alt == [[0, 1]]
    report(record_property, 8, ok, f"boundary label {boundary.tolist()}, fixture eq2 {eq2} vs close_vs_open {alt}")


# ---------------------------------------------------------------- 9


def test_criterion_9_scale_sweep(record_property, tmp_path):
    data = tmp_path / "panel.csv"
    write_panel(synthetic_panel(n_stocks=8, n_days=120, seed=9), data)
    cfg = tmp_path / "run.json"
    cfg.write_text('{"epochs": 1, "L": 16, "batch_size": 32, "seed": 9}')
    code = main(["scales", "--config", str(cfg), "--data", str(data), "--k", "2,3,4", "--out", str(tmp_path / "out")])
    rows = (tmp_path / "out" / "scales.csv").read_text().splitlines()
    shaped = rows[0].startswith("dataset,variant,acc,mcc") and [r.split(",")[-1] for r in rows[1:]] == ["2", "3", "4"]
    x = np.random.default_rng(9).normal(size=(2, 8, 16, 5))
    bad = {k: check_invariants(MSHGFN(ModelConfig(8, 16, n_scales=k), seed=9), x) for k in (2, 3, 4)}
    ok = code == 0 and shaped and not any(bad.values())
    report(record_property, 9, ok, f"exit {code}, {len(rows) - 1} rows, invariant violations {bad}")
