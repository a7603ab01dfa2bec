"""Scale pyramid built by repeated average pooling along time."""

from __future__ import annotations

import math

from . import autodiff as ad


def level_lengths(window: int, n_scales: int) -> list[int]:
    """``[L, ceil(L/2), ceil(L/4), ...]`` with ``n_scales`` entries."""
    if n_scales < 1:
        raise ValueError(f"number of scales must be >= 1, got {n_scales}")
    lengths = [window]
    for _ in range(n_scales - 1):
        lengths.append(math.ceil(lengths[-1] / 2))
    return lengths


def build_pyramid(x, n_scales: int) -> list[ad.Tensor]:
    """Level 1 is ``x`` itself; level k+1 average-pools level k with window 2.

    ``x`` is ``(..., L, D)``. Pooling by 2 at every step gives level lengths
    ``ceil(L / 2**(k-1))``.
    """
    if n_scales < 1:
        raise ValueError(f"number of scales must be >= 1, got {n_scales}")
    levels = [ad.tensor(x) if not isinstance(x, ad.Tensor) else x]
    for _ in range(n_scales - 1):
        levels.append(ad.avg_pool_1d(levels[-1], 2))
    return levels
