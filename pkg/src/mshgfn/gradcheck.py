"""Finite-difference verification of the full model's gradients."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .model import MSHGFN, ModelConfig, param_groups

TINY = ModelConfig(n_stocks=4, window=8, n_scales=2, heads=1, dropout=0.0)


def model_gradcheck(model: MSHGFN, x: np.ndarray, y: np.ndarray, eps: float = 1e-4) -> dict[str, float]:
    """Max ``|analytic - central| / max(1, |central|)`` per parameter group (eval mode)."""
    params = model.params
    ad.zero_grads(params.values())
    ad.backward(model.loss(x, y))
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    ad.zero_grads(params.values())
    worst: dict[str, float] = {}
    for group, names in param_groups(params).items():
        err = 0.0
        for name in names:
            flat = params[name].data.reshape(-1)
            grad = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = model.loss(x, y).item()
                flat[i] = orig - eps
                down = model.loss(x, y).item()
                flat[i] = orig
                central = (up - down) / (2.0 * eps)
                err = max(err, abs(grad[i] - central) / max(1.0, abs(central)))
        worst[group] = err
    return worst


def run_gradcheck(cfg: ModelConfig = TINY, seed: int = 0, batch: int = 2, eps: float = 1e-4) -> dict[str, float]:
    """Gradient check on random inputs with dropout forced off."""
    cfg = replace(cfg, dropout=0.0)
    rng = np.random.default_rng(seed)
    model = MSHGFN(cfg, seed=seed)
    x = rng.normal(size=(batch, cfg.n_stocks, cfg.window, cfg.n_features))
    y = rng.integers(0, 2, size=(batch, cfg.n_stocks))
    return model_gradcheck(model, x, y, eps)
