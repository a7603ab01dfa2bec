"""Per-scale temporal encoders: one self-attention block, and an LSTM for ablation."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return table


def attention_logits(q: ad.Tensor, k: ad.Tensor) -> ad.Tensor:
    return ad.matmul(q, ad.transpose(k)) / math.sqrt(q.shape[-1])


def encode_scale(
    x: ad.Tensor,
    p: dict,
    prefix: str,
    *,
    pool: str = "last",
    dropout: float = 0.0,
    training: bool = False,
    rng=None,
    return_attention: bool = False,
):
    """Encode ``(..., N, L_k, D)`` into ``(..., N, D_model)``.

    Input projection plus sinusoidal positions, multi-head scaled dot-product
    attention over time, output projection, residual and layer norm. The
    sequence collapses to its final step (``pool="last"``) or its time mean.
    Per-head projections are stored stacked as ``(H, D_model, d_h)``.
    """
    length = x.shape[-2]
    if length < 1:
        raise ValueError("cannot encode an empty sequence")
    w_in = p[f"{prefix}.W_in"]
    xd = ad.matmul(x, w_in) + sinusoidal_encoding(length, w_in.shape[-1])
    xh = ad.reshape(xd, xd.shape[:-2] + (1,) + xd.shape[-2:])  # (..., 1, L, D)
    q = ad.matmul(xh, p[f"{prefix}.W_q"])  # (..., H, L, d_h)
    k = ad.matmul(xh, p[f"{prefix}.W_k"])
    v = ad.matmul(xh, p[f"{prefix}.W_v"])
    weights = ad.softmax(attention_logits(q, k), axis=-1)
    heads = ad.matmul(weights, v)
    nd = heads.ndim
    heads = ad.transpose(heads, list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1])
    heads = ad.flatten(heads, -2)  # (..., L, H*d_h)
    attn = ad.dropout(ad.matmul(heads, p[f"{prefix}.W_o"]), dropout, training, rng)
    z = ad.layer_norm(xd + attn, p[f"{prefix}.ln_gain"], p[f"{prefix}.ln_bias"])
    if pool == "last":
        out = z[..., -1, :]
    elif pool == "mean":
        out = ad.mean(z, axis=-2)
    else:
        raise ValueError(f"unknown temporal pooling {pool!r}")
    if return_attention:
        return out, weights
    return out


def lstm_encode_scale(x: ad.Tensor, p: dict, prefix: str) -> ad.Tensor:
    """Single-layer LSTM over time; returns the final hidden state ``(..., N, H)``.

    Gate columns of the stacked weights are ordered input, forget, cell, output.
    """
    w_x, w_h, b = p[f"{prefix}.W_x"], p[f"{prefix}.W_h"], p[f"{prefix}.b"]
    hidden = w_h.shape[0]
    batch_shape = x.shape[:-2]
    h = ad.tensor(np.zeros(batch_shape + (hidden,)))
    c = ad.tensor(np.zeros(batch_shape + (hidden,)))
    # input contributions for every step in one product
    xw = ad.matmul(x, w_x) + b
    for t in range(x.shape[-2]):
        gates = xw[..., t, :] + ad.matmul(h, w_h)
        i = ad.sigmoid(gates[..., 0:hidden])
        f = ad.sigmoid(gates[..., hidden : 2 * hidden])
        g = ad.tanh(gates[..., 2 * hidden : 3 * hidden])
        o = ad.sigmoid(gates[..., 3 * hidden :])
        c = f * c + i * g
        h = o * ad.tanh(c)
    return h
