"""Two-layer prediction head mapping fused features to up/down probabilities."""

from __future__ import annotations

from . import autodiff as ad


def logits(fused: ad.Tensor, p: dict, prefix: str = "head", *, dropout: float = 0.0, training: bool = False, rng=None):
    hidden = ad.relu(ad.matmul(fused, p[f"{prefix}.W_h"]) + p[f"{prefix}.b_h"])
    hidden = ad.dropout(hidden, dropout, training, rng)
    return ad.matmul(hidden, p[f"{prefix}.W_p"]) + p[f"{prefix}.b_p"]


def predict(fused: ad.Tensor, p: dict, prefix: str = "head", **kw) -> ad.Tensor:
    """Row-softmax probabilities ``(..., N, 2)``; column 1 is the probability of "up"."""
    return ad.softmax(logits(fused, p, prefix, **kw), axis=-1)
