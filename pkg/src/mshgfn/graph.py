"""Hierarchical graph learning: per-stock attribute graphs feed a dynamic stock graph."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def attribute_adjacency(e1: ad.Tensor, e2: ad.Tensor) -> ad.Tensor:
    """Row-softmax of ``ReLU(E1 E2^T)``; ``(..., D, h)`` inputs give ``(..., D, D)``."""
    return ad.softmax(ad.relu(ad.matmul(e1, ad.transpose(e2))), axis=-1)


def attribute_gcn(r: ad.Tensor, x: ad.Tensor, w_c: ad.Tensor) -> ad.Tensor:
    """One GCN layer over the D attribute nodes of each stock.

    Each attribute node carries its length-``L_k`` series, so features are
    ``x^T`` of shape ``(..., D, L_k)`` and ``w_c`` is ``(L_k, D)``. Self-loops are
    added to ``r``. Returns ``(..., D, D)``.
    """
    r = ad.tensor(r) if not isinstance(r, ad.Tensor) else r
    x = ad.tensor(x) if not isinstance(x, ad.Tensor) else x
    d = r.shape[-1]
    if x.shape[-1] != d or w_c.shape != (x.shape[-2], d):
        raise ad.DimensionError(
            f"attribute_gcn: adjacency {r.shape}, series {x.shape}, weight {w_c.shape} disagree"
        )
    r_tilde = r + np.eye(d)
    return ad.relu(ad.matmul(ad.matmul(r_tilde, ad.transpose(x)), w_c))


def global_adjacency(embeddings: ad.Tensor) -> ad.Tensor:
    """Cosine similarity of flattened ``(..., N, D, D)`` attribute embeddings -> ``(..., N, N)``."""
    return ad.cosine_matrix(ad.flatten(embeddings, -2))


def normalize_adjacency(a: ad.Tensor) -> ad.Tensor:
    """Clamp negative similarities, add self-loops, then make rows sum to one."""
    n = a.shape[-1]
    pos = ad.relu(a) + np.eye(n)
    return pos / ad.sum(pos, axis=-1, keepdims=True)


def propagate(
    a_hat, z: ad.Tensor, w_g: ad.Tensor, *, dropout: float = 0.0, training: bool = False, rng=None
) -> ad.Tensor:
    """``ReLU(A_hat Z W_g)`` with dropout after the activation; ``a_hat`` is already normalized."""
    out = ad.relu(ad.matmul(ad.matmul(a_hat, z), w_g))
    return ad.dropout(out, dropout, training, rng)


def stock_graph(x: ad.Tensor, p: dict, prefix: str, *, shared: bool = False):
    """Raw and normalized stock adjacency for one scale of ``(..., N, L_k, D)`` windows.

    With per-stock adaptive matrices ``E1``/``E2`` are ``(N, D, h)``; shared ones
    are ``(D, h)`` and broadcast over stocks.
    """
    r = attribute_adjacency(p[f"{prefix}.E1"], p[f"{prefix}.E2"])
    if shared:
        r = ad.reshape(r, (1,) + r.shape)
    emb = attribute_gcn(r, x, p[f"{prefix}.W_c"])
    raw = global_adjacency(emb)
    return raw, normalize_adjacency(raw), r
