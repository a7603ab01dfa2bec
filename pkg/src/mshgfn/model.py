"""MS-HGFN assembly: parameter layout, initialization and the forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .fusion import concat_fuse, fuse_pyramid
from .graph import propagate, stock_graph
from .multiscale import build_pyramid, level_lengths
from .predictor import logits as head_logits
from .temporal import encode_scale, lstm_encode_scale

ABLATIONS = ("none", "no_features_sr", "concat_fusion", "lstm_temporal")
N_CLASSES = 2


@dataclass(frozen=True)
class ModelConfig:
    n_stocks: int
    window: int
    n_scales: int = 3
    n_features: int = 5
    model_dim: int | None = None  # None keeps the literal D-wide pathway
    heads: int = 1
    attr_hidden: int = 8
    shared_adaptive: bool = False
    shared_gate: bool = False
    temporal_pool: str = "last"
    dropout: float = 0.5
    ablation: str = "none"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide the model width ({self.dim})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def dim(self) -> int:
        return self.model_dim or self.n_features

    @property
    def lengths(self) -> list[int]:
        return level_lengths(self.window, self.n_scales)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, ad.Tensor]:
    """Every learnable tensor, keyed ``<group>.<scale>.<name>``; insertion order is stable."""
    rng = np.random.default_rng(seed)
    d_in, d, h_attr = cfg.n_features, cfg.dim, cfg.attr_hidden
    d_h = d // cfg.heads
    arrays: dict[str, np.ndarray] = {}
    for k, length in enumerate(cfg.lengths, start=1):
        if cfg.ablation == "lstm_temporal":
            arrays[f"lstm.{k}.W_x"] = _xavier(rng, (d_in, 4 * d), d_in, d)
            arrays[f"lstm.{k}.W_h"] = _xavier(rng, (d, 4 * d), d, d)
            arrays[f"lstm.{k}.b"] = np.zeros(4 * d)
        else:
            arrays[f"temporal.{k}.W_in"] = _xavier(rng, (d_in, d), d_in, d)
            for name in ("W_q", "W_k", "W_v"):
                arrays[f"temporal.{k}.{name}"] = _xavier(rng, (cfg.heads, d, d_h), d, d_h)
            arrays[f"temporal.{k}.W_o"] = _xavier(rng, (cfg.heads * d_h, d), cfg.heads * d_h, d)
            arrays[f"temporal.{k}.ln_gain"] = np.ones(d)
            arrays[f"temporal.{k}.ln_bias"] = np.zeros(d)
        if cfg.ablation != "no_features_sr":
            e_shape = (d_in, h_attr) if cfg.shared_adaptive else (cfg.n_stocks, d_in, h_attr)
            arrays[f"graph.{k}.E1"] = _xavier(rng, e_shape, d_in, h_attr)
            arrays[f"graph.{k}.E2"] = _xavier(rng, e_shape, d_in, h_attr)
            arrays[f"graph.{k}.W_c"] = _xavier(rng, (length, d_in), length, d_in)
        arrays[f"graph.{k}.W_g"] = _xavier(rng, (d, d), d, d)
    if cfg.ablation == "concat_fusion":
        kd = cfg.n_scales * d
        arrays["fusion.W_cat"] = _xavier(rng, (kd, d), kd, d)
    else:
        arrays["fusion.W_l"] = _xavier(rng, (d, d), d, d)
        gate_tags = ["shared"] if cfg.shared_gate and cfg.n_scales > 1 else [str(k) for k in range(1, cfg.n_scales)]
        for tag in gate_tags:
            arrays[f"fusion.W_a.{tag}"] = _xavier(rng, (2 * d, 1), 2 * d, 1)
        for k in range(1, cfg.n_scales):
            arrays[f"fusion.ln_gain.{k}"] = np.ones(d)
            arrays[f"fusion.ln_bias.{k}"] = np.zeros(d)
    arrays["head.W_h"] = _xavier(rng, (d, d), d, d)
    arrays["head.b_h"] = np.zeros(d)
    arrays["head.W_p"] = _xavier(rng, (d, N_CLASSES), d, N_CLASSES)
    arrays["head.b_p"] = np.zeros(N_CLASSES)
    return {name: ad.tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}


def param_groups(params) -> dict[str, list[str]]:
    """Parameter names grouped by ``<group>.<scale>`` (or ``<group>`` when unscaled)."""
    groups: dict[str, list[str]] = {}
    for name in params:
        parts = name.split(".")
        key = ".".join(parts[:2]) if len(parts) > 2 and parts[1].isdigit() else parts[0]
        groups.setdefault(key, []).append(name)
    return groups


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass, kept for inspection and tests."""

    pyramid: list = field(default_factory=list)
    temporal: list = field(default_factory=list)
    attribute_adjacency: list = field(default_factory=list)
    raw_adjacency: list = field(default_factory=list)
    norm_adjacency: list = field(default_factory=list)
    spatial: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    fused: ad.Tensor | None = None
    logits: ad.Tensor | None = None


class MSHGFN:
    """Callable model over ``(B, N, L, D)`` windows; parameters live in ``self.params``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, ad.Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def with_ablation(self, ablation: str, seed: int = 0) -> "MSHGFN":
        return apply_ablation(self, ablation, seed)

    def forward(self, x, *, training: bool = False, rng=None, trace: ForwardTrace | None = None) -> ad.Tensor:
        """Logits ``(..., N, 2)``."""
        cfg, p = self.cfg, self.params
        x = x if isinstance(x, ad.Tensor) else ad.tensor(x)
        if x.shape[-3:] != (cfg.n_stocks, cfg.window, cfg.n_features):
            raise ad.DimensionError(
                f"expected windows (..., {cfg.n_stocks}, {cfg.window}, {cfg.n_features}), got {x.shape}"
            )
        drop = cfg.dropout
        pyramid = build_pyramid(x, cfg.n_scales)
        spatial = []
        for k, level in enumerate(pyramid, start=1):
            if cfg.ablation == "lstm_temporal":
                z = lstm_encode_scale(level, p, f"lstm.{k}")
            else:
                z = encode_scale(
                    level, p, f"temporal.{k}", pool=cfg.temporal_pool,
                    dropout=drop, training=training, rng=rng,
                )
            if cfg.ablation == "no_features_sr":
                a_hat = np.eye(cfg.n_stocks)
                raw = r = None
            else:
                raw, a_hat, r = stock_graph(level, p, f"graph.{k}", shared=cfg.shared_adaptive)
            x_hat = propagate(a_hat, z, p[f"graph.{k}.W_g"], dropout=drop, training=training, rng=rng)
            spatial.append(x_hat)
            if trace is not None:
                trace.pyramid.append(level)
                trace.temporal.append(z)
                trace.attribute_adjacency.append(r)
                trace.raw_adjacency.append(raw)
                trace.norm_adjacency.append(a_hat)
        if cfg.ablation == "concat_fusion":
            fused = concat_fuse(spatial, p)
        else:
            gates = trace.gates if trace is not None else None
            fused = fuse_pyramid(spatial, p, shared_gate=cfg.shared_gate, gates=gates)
        out = head_logits(fused, p, dropout=drop, training=training, rng=rng)
        if trace is not None:
            trace.spatial = spatial
            trace.fused = fused
            trace.logits = out
        return out

    __call__ = forward

    def predict_proba(self, x) -> np.ndarray:
        """Eval-mode probability of "up", shape ``(..., N)``."""
        out = self.forward(x, training=False).data
        shifted = np.exp(out - out.max(axis=-1, keepdims=True))
        return (shifted / shifted.sum(axis=-1, keepdims=True))[..., 1]

    def loss(self, x, y, *, training: bool = False, rng=None) -> ad.Tensor:
        return ad.cross_entropy(self.forward(x, training=training, rng=rng), y)


def apply_ablation(model: MSHGFN, ablation: str, seed: int = 0) -> MSHGFN:
    """Variant of ``model`` with ``ablation`` applied; ``"none"`` returns the model unchanged.

    Parameter groups shared with the full model keep their current values; the
    groups an ablation introduces are freshly initialized.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if ablation == model.cfg.ablation:
        return model
    cfg = replace(model.cfg, ablation=ablation)
    fresh = init_params(cfg, seed)
    params = {
        name: (ad.tensor(model.params[name].data.copy(), requires_grad=True, name=name) if name in model.params else t)
        for name, t in fresh.items()
    }
    return MSHGFN(cfg, params)
