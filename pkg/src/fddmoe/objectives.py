"""Achievable rates, sum rate and the per-task / multi-task losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ComplexMatrix, Tensor

LN2 = math.log(2.0)


@dataclass
class RateResult:
    per_user_rates: np.ndarray
    sum_rate: np.ndarray | float


def _sinr_parts(H: np.ndarray, V: np.ndarray):
    G = np.abs(np.matmul(H, V)) ** 2  # G[..., k, j] = |h_k^H v_j|^2
    signal = np.diagonal(G, axis1=-2, axis2=-1)
    interference = G.sum(axis=-1) - signal
    return signal, interference


def rates(H: np.ndarray, V: np.ndarray, sigma2: float) -> np.ndarray:
    """Per-user rates in bits/s/Hz; ``H`` is (..., K, n_tx), ``V`` is (..., n_tx, K)."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    signal, interference = _sinr_parts(np.asarray(H), np.asarray(V))
    return np.log1p(signal / (interference + sigma2)) / LN2


def user_rate(H: np.ndarray, V: np.ndarray, k: int, sigma2: float) -> float:
    return float(rates(H, V, sigma2)[..., k])


def sum_rate(H: np.ndarray, V: np.ndarray, sigma2: float) -> RateResult:
    r = rates(H, V, sigma2)
    s = r.sum(axis=-1)
    return RateResult(r, float(s) if np.ndim(s) == 0 else s)


def rates_t(H: ComplexMatrix, V: ComplexMatrix, sigma2: float) -> Tensor:
    """Differentiable per-user rates, shape (..., K)."""
    G = (H @ V).abs2()
    K = G.shape[-1]
    eye = np.eye(K, dtype=G.dtype)
    signal = (G * eye).sum(axis=-1)
    interference = (G * (1.0 - eye)).sum(axis=-1)
    sinr = signal / (interference + sigma2)
    return dc.scale(dc.log(sinr + 1.0), 1.0 / LN2)


def sum_rate_t(H: ComplexMatrix, V: ComplexMatrix, sigma2: float) -> Tensor:
    return rates_t(H, V, sigma2).sum(axis=-1)


def task_loss(H: ComplexMatrix, V: ComplexMatrix, sigma2: float) -> Tensor:
    """Negative mean sum rate over the batch (leading axis)."""
    if H.re.ndim == 2:
        return dc.neg(sum_rate_t(H, V, sigma2))
    if H.shape[0] == 0:
        raise ValueError("empty batch")
    return dc.neg(sum_rate_t(H, V, sigma2).mean())


def mtl_loss(losses: Sequence[Tensor] | Mapping[str, Tensor], weights) -> Tensor:
    if isinstance(losses, Mapping):
        if not isinstance(weights, Mapping):
            raise ValueError("weights must be keyed like losses")
        missing = set(losses) ^ set(weights)
        if missing:
            raise ValueError(f"task weight/loss mismatch for {sorted(missing)}")
        keys = list(losses)
        losses = [losses[k] for k in keys]
        weights = [weights[k] for k in keys]
    losses, weights = list(losses), list(weights)
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses but {len(weights)} weights")
    total = None
    for l, w in zip(losses, weights):
        term = dc.scale(dc.as_tensor(l), float(w))
        total = term if total is None else total + term
    return total


def mtl_weights(task_sizes: Mapping[str, int], mode: str = "uniform") -> dict[str, float]:
    """Task weights: all ones, or proportional to dataset size (summing to the task count)."""
    if mode == "uniform":
        return {k: 1.0 for k in task_sizes}
    if mode == "proportional":
        total = sum(task_sizes.values())
        n = len(task_sizes)
        return {k: n * s / total for k, s in task_sizes.items()}
    raise ValueError(f"unknown weighting mode {mode!r}")
