"""Top-down gated fusion of per-scale embeddings, plus the concatenation ablation."""

from __future__ import annotations

from . import autodiff as ad


def gate(x_hat: ad.Tensor, coarser: ad.Tensor, w_a: ad.Tensor) -> ad.Tensor:
    """Scalar gate per stock, ``sigmoid([x_hat || coarser] W_a)`` with shape ``(..., N, 1)``."""
    return ad.sigmoid(ad.matmul(ad.concat([x_hat, coarser], axis=-1), w_a))


def fuse_pyramid(embeddings, p: dict, prefix: str = "fusion", *, shared_gate: bool = False, gates=None):
    """Fuse ``[X_hat^1 .. X_hat^K]`` from the coarsest scale down and return ``P^1``.

    ``P^K = X_hat^K W_l``; then for k = K-1 .. 1 the gate ``alpha^k`` blends
    ``X_hat^k`` with ``P^{k+1}`` and the blend is layer-normalized. When ``gates``
    is a list, each ``alpha^k`` is appended to it (coarse to fine).
    """
    if not embeddings:
        raise ValueError("fuse_pyramid needs at least one scale")
    shape = embeddings[0].shape
    for e in embeddings:
        if e.shape != shape:
            raise ad.DimensionError(f"fuse_pyramid: embedding shapes {[e.shape for e in embeddings]} differ")
    n_scales = len(embeddings)
    fused = ad.matmul(embeddings[-1], p[f"{prefix}.W_l"])
    for k in range(n_scales - 1, 0, -1):
        tag = "shared" if shared_gate else str(k)
        x_hat = embeddings[k - 1]
        alpha = gate(x_hat, fused, p[f"{prefix}.W_a.{tag}"])
        if gates is not None:
            gates.append(alpha)
        mixed = alpha * x_hat + (1.0 - alpha) * fused
        fused = ad.layer_norm(mixed, p[f"{prefix}.ln_gain.{k}"], p[f"{prefix}.ln_bias.{k}"])
    return fused


def concat_fuse(embeddings, p: dict, prefix: str = "fusion"):
    """Concatenate every scale along features and project ``K*D -> D``."""
    if not embeddings:
        raise ValueError("concat_fuse needs at least one scale")
    shape = embeddings[0].shape
    for e in embeddings:
        if e.shape != shape:
            raise ad.DimensionError(f"concat_fuse: embedding shapes {[e.shape for e in embeddings]} differ")
    return ad.matmul(ad.concat(list(embeddings), axis=-1), p[f"{prefix}.W_cat"])
