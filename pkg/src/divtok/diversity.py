"""Pairwise-orthogonality penalty on token attention maps.

For maps alpha of shape (N, M, S) the penalty is

    L_div = (1/N) * sum_k sum_{i != j} <alpha_i^k, alpha_j^k>^2

over ordered pairs, so each unordered pair contributes twice. With
softmax-normalized maps every inner product lies in [0, 1] and the loss is
zero exactly when the maps have pairwise disjoint support.
"""

from __future__ import annotations

import numpy as np

from divtok.tensor import Tensor, as_tensor, matmul, square


def _gram(maps: Tensor) -> Tensor:
    return matmul(maps, maps.transpose(0, 2, 1))


def diversity_loss(maps) -> Tensor:
    """Batch-mean of the summed squared inner products between distinct token maps."""
    maps = as_tensor(maps)
    if maps.ndim != 3:
        raise ValueError(f"maps must be (N, M, S), got {maps.shape}")
    n, m, _ = maps.shape
    off = 1.0 - np.eye(m, dtype=maps.dtype)
    sq = square(_gram(maps))
    return (sq * off).sum() * (1.0 / n)


def pairwise_overlap_matrix(maps) -> np.ndarray:
    """O[k, i, j] = <alpha_i^k, alpha_j^k>^2, one M x M matrix per example."""
    a = np.asarray(maps.data if isinstance(maps, Tensor) else maps, dtype=np.float64)
    g = a @ a.transpose(0, 2, 1)
    return g * g


def mean_off_diagonal(overlap: np.ndarray) -> float:
    """Mean of O[k, i, j] over examples and ordered pairs i != j (0 when M == 1)."""
    m = overlap.shape[-1]
    if m < 2:
        return 0.0
    off = ~np.eye(m, dtype=bool)
    return float(overlap[:, off].mean())


def max_off_diagonal(overlap: np.ndarray) -> float:
    m = overlap.shape[-1]
    if m < 2:
        return 0.0
    return float(overlap[:, ~np.eye(m, dtype=bool)].max())


def select_layers(maps_per_layer: list[list[Tensor]], which: str = "all") -> list[Tensor]:
    """Flatten per-layer, per-stream maps; ``which="last"`` keeps only the final layer."""
    if which == "all":
        chosen = maps_per_layer
    elif which == "last":
        chosen = maps_per_layer[-1:]
    else:
        raise ValueError(f"div_layers must be 'all' or 'last', not {which!r}")
    return [m for layer in chosen for m in layer]


def combined_loss(task_loss: Tensor, maps_per_layer: list[list[Tensor]], lam: float, which: str = "all") -> Tensor:
    """task_loss + lam * mean over selected layers and streams of diversity_loss."""
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    if lam == 0:
        return task_loss
    terms = [diversity_loss(m) for m in select_layers(maps_per_layer, which)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return task_loss + total * (lam / len(terms))
