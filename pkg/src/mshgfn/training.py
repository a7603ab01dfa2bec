"""Adam training loop, run configuration and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import LABEL_MODES, NormStats, stack_batch
from .evaluation import evaluate
from .model import ABLATIONS, MSHGFN, ForwardTrace, ModelConfig, param_groups

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mshgfn-checkpoint/1"


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    dropout: float = 0.5
    K: int = 3
    L: int = 16
    seed: int = 0
    ablation: str = "none"
    label_mode: str = "eq2_gamma"
    gamma: float = 0.005
    model_dim: int | None = None
    heads: int = 1
    attr_hidden: int = 8
    shared_adaptive: bool = False
    shared_gate: bool = False
    temporal_pool: str = "last"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_grad: float | None = None
    fractions: tuple[float, float, float] = (0.75, 0.125, 0.125)

    def __post_init__(self):
        self.fractions = tuple(self.fractions)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"unknown label_mode {self.label_mode!r}; expected one of {LABEL_MODES}")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    def model_config(self, n_stocks: int) -> ModelConfig:
        return ModelConfig(
            n_stocks=n_stocks,
            window=self.L,
            n_scales=self.K,
            model_dim=self.model_dim,
            heads=self.heads,
            attr_hidden=self.attr_hidden,
            shared_adaptive=self.shared_adaptive,
            shared_gate=self.shared_gate,
            temporal_pool=self.temporal_pool,
            dropout=self.dropout,
            ablation=self.ablation,
        )


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, ad.Tensor], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update from each parameter's ``.grad``."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"no gradient for parameter(s): {', '.join(missing)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class FitResult:
    model: MSHGFN
    history: list[dict]
    best_epoch: int  # 0 means the initialization was kept


def _check_finite(loss: ad.Tensor, params, epoch: int, batch: int) -> None:
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch}")
    bad = sorted(
        {group for group, names in param_groups(params).items() for n in names if not np.all(np.isfinite(params[n].grad))}
    )
    if bad:
        raise NumericError(f"non-finite gradient at epoch {epoch}, batch {batch} in group(s): {', '.join(bad)}")


def gate_statistics(model: MSHGFN, samples, batch_size: int = 64) -> dict[str, float]:
    """Mean/std of each fusion gate over ``samples`` in eval mode, keyed ``gate{k}_mean``."""
    if model.cfg.ablation == "concat_fusion" or model.cfg.n_scales < 2 or not samples:
        return {}
    per_scale: dict[int, list[np.ndarray]] = {}
    for lo in range(0, len(samples), batch_size):
        x, _ = stack_batch(samples[lo : lo + batch_size])
        trace = ForwardTrace()
        model.forward(x, training=False, trace=trace)
        # gates are recorded coarse to fine: k = K-1 .. 1
        for offset, alpha in enumerate(trace.gates):
            per_scale.setdefault(model.cfg.n_scales - 1 - offset, []).append(alpha.data.reshape(-1))
    out = {}
    for k in sorted(per_scale):
        vals = np.concatenate(per_scale[k])
        out[f"gate{k}_mean"] = float(vals.mean())
        out[f"gate{k}_std"] = float(vals.std())
    return out


def fit(train_samples, val_samples, config: TrainConfig, model: MSHGFN | None = None) -> FitResult:
    """Train with Adam on shuffled window batches; keep the best-validation-ACC parameters."""
    if not train_samples or not val_samples:
        raise ValueError("fit needs non-empty training and validation samples")
    n_stocks = train_samples[0].window.shape[0]
    if model is None:
        model = MSHGFN(config.model_config(n_stocks), seed=config.seed)
    params = model.params
    state = AdamState(config.beta1, config.beta2, config.adam_eps)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])

    def snapshot():
        return {n: p.data.copy() for n, p in params.items()}

    best = snapshot()
    best_epoch, best_acc = 0, -math.inf
    history: list[dict] = []
    n = len(train_samples)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            x, y = stack_batch([train_samples[i] for i in order[lo : lo + config.batch_size]])
            ad.zero_grads(params.values())
            loss = model.loss(x, y, training=True, rng=dropout_rng)
            ad.backward(loss)
            for p in params.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            _check_finite(loss, params, epoch, b)
            if config.clip_grad is not None:
                _clip(params, config.clip_grad)
            adam_step(params, state, config.learning_rate)
            total += loss.item() * len(y)
            count += len(y)
        val = evaluate(model, val_samples)
        row = {"epoch": epoch, "train_loss": total / count, "val_acc": val.acc, "val_mcc": val.mcc}
        row.update(gate_statistics(model, val_samples))
        history.append(row)
        logger.info("epoch %d loss %.6f val_acc %.4f val_mcc %.4f", epoch, row["train_loss"], val.acc, val.mcc)
        if val.acc > best_acc:
            best_acc, best_epoch, best = val.acc, epoch, snapshot()
    for name, p in params.items():
        p.data[...] = best[name]
        p.grad = None
    return FitResult(model, history, best_epoch)


def _clip(params, max_norm: float) -> None:
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()))
    if norm > max_norm:
        for p in params.values():
            p.grad *= max_norm / norm


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: MSHGFN, config: TrainConfig, stats: NormStats | None, tickers, history=()) -> None:
    """JSON checkpoint: configs, shaped parameter values, normalization stats, history."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "train_config": config.to_dict(),
        "model_config": asdict(model.cfg),
        "tickers": list(tickers),
        "params": {n: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()} for n, p in model.params.items()},
        "norm_stats": stats.to_json() if stats is not None else None,
        "history": list(history),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[MSHGFN, TrainConfig, NormStats | None, list[str], list[dict]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = ModelConfig(**doc["model_config"])
    params = {
        n: ad.tensor(np.array(e["values"], dtype=np.float64).reshape(e["shape"]), requires_grad=True, name=n)
        for n, e in doc["params"].items()
    }
    stats = NormStats.from_json(doc["norm_stats"]) if doc["norm_stats"] is not None else None
    return MSHGFN(cfg, params), TrainConfig.from_dict(doc["train_config"]), stats, doc["tickers"], doc["history"]


def train_on_panel(panel, config: TrainConfig):
    """Label, normalize, window and split ``panel``, then fit. Returns ``(FitResult, Dataset)``."""
    from .data import prepare_dataset

    ds = prepare_dataset(panel, config.L, config.gamma, config.label_mode, config.fractions)
    if config.epochs == 0:
        model = MSHGFN(config.model_config(panel.n_stocks), seed=config.seed)
        return FitResult(model, [], 0), ds
    return fit(ds.train, ds.val, config), ds
