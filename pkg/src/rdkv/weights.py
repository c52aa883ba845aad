"""Distortion weights for V tokens and K channels.

A token's weight is the attention mass it receives from the probe queries,
which equals the total-variation shift caused by evicting it. A channel's
weight is the spectral norm of the rank-one logit change caused by zeroing it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .cache_model import AttentionMatrix
from .errors import NumericError, ShapeError


@dataclass(frozen=True, eq=False)
class WeightVector:
    values: np.ndarray
    kind: Literal["token", "channel"]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.kind not in ("token", "channel"):
            raise ValueError(f"kind must be 'token' or 'channel', got {self.kind!r}")
        if not np.isfinite(vals).all() or (vals < 0).any():
            raise NumericError("weights must be finite and non-negative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.shape[0]


def _as_prob_stack(attn) -> np.ndarray:
    if isinstance(attn, AttentionMatrix):
        return attn.a[None]
    if isinstance(attn, (list, tuple)):
        return np.stack([a.a if isinstance(a, AttentionMatrix) else np.asarray(a) for a in attn])
    arr = np.asarray(attn, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def avg_pool_same(x: np.ndarray, kernel: int) -> np.ndarray:
    """Centered moving average, stride 1, zero padding of ``kernel // 2`` on each side."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"pool kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return np.asarray(x, dtype=np.float64).copy()
    return np.convolve(x, np.full(kernel, 1.0 / kernel), mode="same")


def raw_token_mass(attn) -> np.ndarray:
    """Column sums of the attention stack over every query row of every head."""
    probs = _as_prob_stack(attn)
    return probs.sum(axis=(0, 1))


def group_token_weights(attn, group: int, pool_kernel: int = 5) -> list[WeightVector]:
    """Token weights for each KV head, from attention of all query heads ``[H, S, T]``.

    Consecutive blocks of ``group`` query heads share one KV head; their rows
    are summed, not averaged.
    """
    probs = _as_prob_stack(attn)
    if probs.ndim != 3:
        raise ShapeError(f"attention stack must be [heads, queries, T], got {probs.shape}")
    n_heads = probs.shape[0]
    if group < 1 or n_heads % group:
        raise ShapeError(f"group size {group} does not divide {n_heads} query heads")
    out = []
    for start in range(0, n_heads, group):
        raw = probs[start:start + group].sum(axis=(0, 1))
        out.append(WeightVector(avg_pool_same(raw, pool_kernel), "token"))
    return out


def token_weights(attn, group: int = 1, pool_kernel: int = 5) -> WeightVector:
    """Pooled token weights for one KV head from the attention of its ``group`` query heads."""
    weights = group_token_weights(attn, group, pool_kernel)
    if len(weights) != 1:
        raise ShapeError(
            f"attention covers {len(weights)} KV-head groups; use group_token_weights"
        )
    return weights[0]


def tv_after_evict(a_row, t: int) -> float:
    """Total-variation distance between ``a_row`` and its renormalization after evicting ``t``.

    Computed by explicit summation; the result equals ``a_row[t]``.
    """
    a = np.asarray(a_row, dtype=np.float64).reshape(-1)
    if not 0 <= t < a.shape[0]:
        raise IndexError(f"token index {t} out of range for row of length {a.shape[0]}")
    if a[t] >= 1.0:
        raise NumericError("evicting a token holding all attention mass leaves nothing to renormalize")
    # divide by the mass actually left over rather than 1 - a[t]; when a[t] is close
    # to one, rounding in the row sum would otherwise be amplified by 1 / (1 - a[t])
    renorm = a.copy()
    renorm[t] = 0.0
    rest = math.fsum(renorm)
    if rest <= 0.0:
        raise NumericError("evicting a token holding all attention mass leaves nothing to renormalize")
    renorm /= rest
    return 0.5 * float(np.abs(a - renorm).sum())


def _check_qk(q: np.ndarray, k: np.ndarray):
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"Q {q.shape} and K {k.shape} must be 2-D with a shared head dim")


def channel_weights(queries, keys) -> WeightVector:
    """``w_c = ||Q[:, c]|| * ||K[:, c]|| / sqrt(d)`` for every channel."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.ndim == 3:
        q = q.reshape(-1, q.shape[-1])
    _check_qk(q, k)
    d = q.shape[1]
    w = np.linalg.norm(q, axis=0) * np.linalg.norm(k, axis=0) / np.sqrt(d)
    return WeightVector(w, "channel")


def deviation_matrix(queries, keys, c: int) -> np.ndarray:
    """Logit change ``-Q[:, c] K[:, c]^T / sqrt(d)`` from zeroing channel ``c``."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.ndim == 3:
        q = q.reshape(-1, q.shape[-1])
    _check_qk(q, k)
    return -np.outer(q[:, c], k[:, c]) / np.sqrt(q.shape[1])


def spectral_norm(m: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``m^T m``."""
    m = np.asarray(m, dtype=np.float64)
    if not np.any(m):
        return 0.0
    x = np.random.default_rng(seed).standard_normal(m.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = m.T @ (m @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # start vector landed in the null space; restart along a column
            x = m[np.argmax(np.abs(m).sum(axis=1))].copy()
            x /= np.linalg.norm(x)
            continue
        x = y / ny
        new_sigma = float(np.sqrt(ny))
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return new_sigma
        sigma = new_sigma
    raise NumericError(f"power iteration did not converge in {max_iter} iterations")


def logit_deviation_norm(queries, keys, c: int) -> float:
    """Spectral norm of the explicit deviation matrix for channel ``c``."""
    return spectral_norm(deviation_matrix(queries, keys, c))
