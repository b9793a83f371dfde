"""Soft and hard dynamic time warping between target and query sequences.

Two path families are supported:

* ``standard``: monotone paths from cell (1, 1) to (M, N) with down, right and
  diagonal steps. Every target and query frame is matched.
* ``subsequence``: the path may start at any target row in the first query
  column and end at any target row in the last query column, so only a
  contiguous block of target rows is matched. This is what locates a query
  inside a longer target.

The soft value is ``-gamma * log(sum over paths of exp(-path_cost / gamma))``
computed by the usual smoothed-min recursion. Its gradient with respect to the
cost matrix (the expected alignment) is obtained with an adjoint recursion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numba
import numpy as np

from .autodiff import Tensor, _node, as_tensor

MODES = ("standard", "subsequence")


# ------------------------------------------------------------------ kernels

@numba.njit(cache=True)
def _softmin3(a, b, c, gamma):
    m = min(a, min(b, c))
    if m == np.inf:
        return np.inf
    s = np.exp(-(a - m) / gamma) + np.exp(-(b - m) / gamma) + np.exp(-(c - m) / gamma)
    return m - gamma * np.log(s)


@numba.njit(cache=True)
def _soft_forward(C, gamma, subsequence, allowed):
    M, N = C.shape
    R = np.full((M + 1, N + 1), np.inf)
    R[0, 0] = 0.0
    if subsequence:
        for i in range(1, M + 1):
            R[i, 0] = 0.0
    for i in range(1, M + 1):
        for j in range(1, N + 1):
            if not allowed[i - 1, j - 1]:
                continue
            horiz = R[i, j - 1] if j > 1 else np.inf
            R[i, j] = C[i - 1, j - 1] + _softmin3(R[i - 1, j - 1], R[i - 1, j], horiz, gamma)
    if subsequence:
        m = np.inf
        for i in range(1, M + 1):
            m = min(m, R[i, N])
        s = 0.0
        for i in range(1, M + 1):
            s += np.exp(-(R[i, N] - m) / gamma)
        value = m - gamma * np.log(s)
    else:
        value = R[M, N]
    return R, value


@numba.njit(cache=True)
def _soft_backward(C, R, value, gamma, subsequence):
    """Adjoint of the final value with respect to every DP cell."""
    M, N = C.shape
    G = np.zeros((M + 2, N + 2))
    if subsequence:
        for i in range(1, M + 1):
            G[i, N] = np.exp(-(R[i, N] - value) / gamma)
    else:
        G[M, N] = 1.0
    for i in range(M, 0, -1):
        for j in range(N, 0, -1):
            r = R[i, j]
            if r == np.inf:
                G[i, j] = 0.0
                continue
            g = G[i, j]
            if i < M and R[i + 1, j] < np.inf:
                g += G[i + 1, j] * np.exp(-(r - (R[i + 1, j] - C[i, j - 1])) / gamma)
            if j < N and R[i, j + 1] < np.inf:
                g += G[i, j + 1] * np.exp(-(r - (R[i, j + 1] - C[i - 1, j])) / gamma)
            if i < M and j < N and R[i + 1, j + 1] < np.inf:
                g += G[i + 1, j + 1] * np.exp(-(r - (R[i + 1, j + 1] - C[i, j])) / gamma)
            G[i, j] = g
    return G[1:M + 1, 1:N + 1].copy()


@numba.njit(cache=True)
def _hard_forward(C, subsequence, allowed):
    M, N = C.shape
    D = np.full((M + 1, N + 1), np.inf)
    D[0, 0] = 0.0
    if subsequence:
        for i in range(1, M + 1):
            D[i, 0] = 0.0
    for i in range(1, M + 1):
        for j in range(1, N + 1):
            if not allowed[i - 1, j - 1]:
                continue
            horiz = D[i, j - 1] if j > 1 else np.inf
            D[i, j] = C[i - 1, j - 1] + min(D[i - 1, j - 1], min(D[i - 1, j], horiz))
    return D


@numba.njit(cache=True)
def _backtrack(D, end_row):
    """Follow argmin predecessors; ties prefer diagonal, then vertical."""
    M = D.shape[0] - 1
    N = D.shape[1] - 1
    path = np.zeros((M, N), dtype=np.int8)
    i = end_row
    j = N
    while True:
        path[i - 1, j - 1] = 1
        if j == 1:
            diag = D[i - 1, 0]
            vert = D[i - 1, 1] if i > 1 else np.inf
            if diag <= vert:
                break
            i -= 1
            continue
        diag = D[i - 1, j - 1]
        vert = D[i - 1, j]
        horiz = D[i, j - 1]
        if diag <= vert and diag <= horiz:
            i -= 1
            j -= 1
        elif vert <= horiz:
            i -= 1
        else:
            j -= 1
    return path


# ------------------------------------------------------------------ helpers

def _check_gamma(gamma):
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown alignment mode {mode!r}; expected one of {MODES}")
    return mode == "subsequence"


def band_mask(M, N, band=None):
    """Sakoe-Chiba band around the rescaled diagonal (``None`` = no band)."""
    if band is None:
        return np.ones((M, N), dtype=np.bool_)
    i = np.arange(M)[:, None] * (N - 1) / max(M - 1, 1)
    j = np.arange(N)[None, :]
    return np.abs(i - j) <= band


def _as_cost(cost):
    C = np.ascontiguousarray(np.asarray(cost, dtype=np.float64))
    if C.ndim != 2 or C.size == 0:
        raise ValueError(f"cost matrix must be a nonempty 2-D array, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix contains non-finite values")
    return C


# ------------------------------------------------------------------ public API

@dataclass
class AlignmentResult:
    soft_cost: float
    dp_table: np.ndarray
    expected_alignment: np.ndarray
    gamma: float
    mode: str = "standard"
    binary_path: Optional[np.ndarray] = None
    hard_cost: Optional[float] = None
    span: Optional[Tuple[int, int]] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        out = {
            "mode": self.mode,
            "gamma": self.gamma,
            "soft_cost": self.soft_cost,
            "dp_table": clean(self.dp_table),
            "expected_alignment": self.expected_alignment.tolist(),
        }
        if self.binary_path is not None:
            out["binary_path"] = self.binary_path.astype(int).tolist()
            out["hard_cost"] = self.hard_cost
        if self.span is not None:
            out["span"] = list(self.span)
        return out


def soft_dtw(cost, gamma=0.1, mode="standard", band=None):
    """Soft-DTW value, DP table and expected alignment of a cost matrix."""
    _check_gamma(gamma)
    sub = _check_mode(mode)
    if sub and band is not None:
        raise ValueError("band constraint is only defined for standard alignment")
    C = _as_cost(cost)
    R, value = _soft_forward(C, float(gamma), sub, band_mask(*C.shape, band))
    E = _soft_backward(C, R, value, float(gamma), sub)
    return AlignmentResult(float(value), R, E, float(gamma), mode)


def hard_dtw(cost, mode="standard", band=None):
    """Classical DTW: ``(cost, binary_path)`` of the cheapest admissible path."""
    sub = _check_mode(mode)
    C = _as_cost(cost)
    D = _hard_forward(C, sub, band_mask(*C.shape, band))
    M, N = C.shape
    if sub:
        end = int(np.argmin(D[1:, N])) + 1
    else:
        end = M
    value = D[end, N]
    if not np.isfinite(value):
        raise ValueError("no admissible path inside the band")
    return float(value), _backtrack(D, end).astype(np.int64)


def extract_span(binary_path):
    """First and last target rows touched by the path (0-based, inclusive)."""
    path = np.asarray(binary_path)
    rows = np.flatnonzero(path.any(axis=1))
    if rows.size == 0:
        raise ValueError("binary path is empty; no target span")
    return int(rows[0]), int(rows[-1])


def align(cost, gamma=0.1, mode="standard", band=None):
    """Soft alignment plus hard path and span in one result."""
    res = soft_dtw(cost, gamma, mode, band)
    res.hard_cost, res.binary_path = hard_dtw(cost, mode, band)
    res.span = extract_span(res.binary_path)
    return res


# ------------------------------------------------------------------ differentiable pieces

_ZERO_NORM = 1e-12


def cosine_cost(target, query):
    """Pairwise ``1 - cos`` between rows of ``target`` and ``query``.

    Accepts (M, d)/(N, d) or batched (B, M, d)/(B, N, d) inputs and returns a
    tensor of shape (M, N) or (B, M, N). Zero rows have cost 1 and no gradient.
    """
    a, b = as_tensor(target), as_tensor(query)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"cosine_cost: feature dims differ, {a.shape} vs {b.shape}")
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ValueError(f"cosine_cost: expected matching 2-D or 3-D inputs, got {a.shape}, {b.shape}")
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("cosine_cost: empty sequence")
    ad, bd = a.data, b.data
    na = np.linalg.norm(ad, axis=-1, keepdims=True)
    nb = np.linalg.norm(bd, axis=-1, keepdims=True)
    ia = np.where(na > _ZERO_NORM, 1.0 / np.where(na > _ZERO_NORM, na, 1.0), 0.0)
    ib = np.where(nb > _ZERO_NORM, 1.0 / np.where(nb > _ZERO_NORM, nb, 1.0), 0.0)
    ua, ub = ad * ia, bd * ib
    sim = ua @ np.swapaxes(ub, -1, -2)
    out = 1.0 - sim

    def back(g):
        gs = -g
        ga = gb = None
        if a.requires_grad:
            t = gs @ ub
            ga = ia * (t - ua * (t * ua).sum(axis=-1, keepdims=True))
        if b.requires_grad:
            t = np.swapaxes(gs, -1, -2) @ ua
            gb = ib * (t - ub * (t * ub).sum(axis=-1, keepdims=True))
        return ga, gb

    return _node(out, (a, b), back)


def soft_dtw_value(cost, gamma=0.1, mode="standard", lengths=None):
    """Differentiable soft-DTW value.

    ``cost`` is an (M, N) tensor, giving a scalar, or a padded (B, M, N)
    tensor with per-sample ``lengths`` [(M_b, N_b), ...], giving shape (B,).
    Only the top-left ``M_b x N_b`` block of each sample is used.
    """
    _check_gamma(gamma)
    sub = _check_mode(mode)
    cost = as_tensor(cost)
    single = cost.ndim == 2
    C = cost.data[None] if single else cost.data
    if lengths is None:
        lengths = [C.shape[1:]] * C.shape[0]
    values = np.empty(C.shape[0])
    grads = np.zeros_like(C)
    for b, (m, n) in enumerate(lengths):
        Cb = np.ascontiguousarray(C[b, :m, :n])
        R, v = _soft_forward(Cb, float(gamma), sub, np.ones((m, n), dtype=np.bool_))
        values[b] = v
        grads[b, :m, :n] = _soft_backward(Cb, R, v, float(gamma), sub)
    if single:
        values, grads = values[0], grads[0]
        return _node(np.asarray(values), (cost,), lambda g: (g * grads,))
    return _node(values, (cost,), lambda g: (g[:, None, None] * grads,))


def alignment_loss(target, query, gamma=0.1, mode="standard"):
    """Soft-DTW over the cosine cost of two feature sequences (scalar tensor)."""
    return soft_dtw_value(cosine_cost(target, query), gamma, mode)


def to_feature_array(seq):
    """Accept a FeatureSequence-like object or an array."""
    feats = getattr(seq, "features", seq)
    return feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)
