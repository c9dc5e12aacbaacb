"""Differentiable primitives with hand-written backward passes.

These cover the geometric parts of the model: masked Sinkhorn, dominant
eigenvectors of symmetric 4x4 matrices, quaternion -> matrix, linear blend
skinning and the matrix-Fisher log-normalizer.
"""
from __future__ import annotations

import numpy as np

from .. import fisher
from .autodiff import Tensor, _node, as_tensor

_NEG = -1e30


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    return np.log(s) + m, e / s


def sinkhorn(logits, row_mask=None, col_mask=None, iters: int = 50, tol: float = 0.0) -> Tensor:
    """Log-domain Sinkhorn over a (B, K1, K2) or (K1, K2) batch of logits.

    Valid rows sum to ``1/K1`` and valid columns to ``1/K2`` (per item);
    padded entries are exactly zero. With ``tol > 0`` iteration stops once
    every item's row marginals are within ``tol``.
    """
    logits = as_tensor(logits)
    x0 = logits.data
    single = x0.ndim == 2
    if single:
        x0 = x0[None]
    B, K1, K2 = x0.shape
    rm = np.ones((B, K1), bool) if row_mask is None else np.asarray(row_mask, bool).reshape(B, K1)
    cm = np.ones((B, K2), bool) if col_mask is None else np.asarray(col_mask, bool).reshape(B, K2)
    mask = rm[:, :, None] & cm[:, None, :]
    n1 = rm.sum(axis=1).astype(float)
    n2 = cm.sum(axis=1).astype(float)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise ValueError("every item needs at least one valid row and column")
    log_r = -np.log(n1)[:, None, None]
    log_c = -np.log(n2)[:, None, None]

    x = np.where(mask, x0, _NEG)
    x = x - np.where(mask, x, -np.inf).max(axis=(1, 2), keepdims=True)
    x = np.where(mask, x, _NEG)
    softs = []
    for _ in range(iters):
        l1, s1 = _lse(x, 2)
        x = np.where(mask, x - l1 + log_r, _NEG)
        l2, s2 = _lse(x, 1)
        x = np.where(mask, x - l2 + log_c, _NEG)
        softs.append((np.where(mask, s1, 0.0), np.where(mask, s2, 0.0)))
        if tol > 0:
            rows = np.where(mask, np.exp(x), 0.0).sum(axis=2)
            if np.max(np.abs(np.where(rm, rows - 1.0 / n1[:, None], 0.0))) < tol:
                break
    p = np.where(mask, np.exp(x), 0.0)

    def back(g):
        g = g[None] if single else g
        dx = np.where(mask, g * p, 0.0)
        for s1, s2 in reversed(softs):
            dx = dx - s2 * dx.sum(axis=1, keepdims=True)
            dx = dx - s1 * dx.sum(axis=2, keepdims=True)
            dx = np.where(mask, dx, 0.0)
        return (dx[0] if single else dx,)

    return _node(p[0] if single else p, (logits,), back)


def eigh_top(m) -> Tensor:
    """Dominant eigenvector of symmetric (..., 4, 4) matrices, first nonzero entry >= 0."""
    m = as_tensor(m)
    A = 0.5 * (m.data + np.swapaxes(m.data, -1, -2))
    vals, vecs = np.linalg.eigh(A)
    top = vecs[..., :, -1]
    lead = np.take_along_axis(top, np.argmax(np.abs(top) > 1e-12, axis=-1)[..., None], axis=-1)
    sign = np.where(lead < 0, -1.0, 1.0)
    out = top * sign

    def back(g):
        gv = g * sign
        proj = np.einsum("...ik,...i->...k", vecs, gv)  # v_k . g
        gap = vals[..., -1:] - vals
        gap = np.where(np.abs(gap) < 1e-12, np.inf, gap)
        coef = proj / gap
        coef[..., -1] = 0.0
        left = np.einsum("...ik,...k->...i", vecs, coef)
        gA = left[..., :, None] * top[..., None, :]
        return (0.5 * (gA + np.swapaxes(gA, -1, -2)),)

    return _node(out, (m,), back)


def quat_to_mat(q) -> Tensor:
    """Attitude matrices of (..., 4) quaternions (assumed unit)."""
    q = as_tensor(q)
    w, x, y, z = np.moveaxis(q.data, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)

    def back(G):
        g = lambda i, j: G[..., i, j]  # noqa: E731
        dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
        dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
                  + w * g(2, 1) - 2 * x * g(2, 2))
        dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
                  + z * g(2, 1) - 2 * y * g(2, 2))
        dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2)
                  + x * g(2, 0) + y * g(2, 1))
        return (np.stack([dw, dx, dy, dz], axis=-1),)

    return _node(R, (q,), back)


def lbs(R, t, offsets, weights) -> Tensor:
    """Skinned vertices ``sum_k w_nk (R_k o_nk + t_k)``.

    R: (K, 3, 3) tensor, t: (K, 3) tensor, offsets: (N, K, 3) array of
    ``v_n - c_k``, weights: (N, K) array.
    """
    R, t = as_tensor(R), as_tensor(t)
    W = np.asarray(weights, dtype=np.float64)
    off = np.asarray(offsets, dtype=np.float64)
    out = np.einsum("nk,kij,nkj->ni", W, R.data, off) + W @ t.data

    def back(g):
        gR = np.einsum("nk,ni,nkj->kij", W, g, off)
        return gR, W.T @ g

    return _node(out, (R, t), back)


def fisher_log_c(F) -> Tensor:
    """Batched matrix-Fisher log-normalizer over (..., 3, 3)."""
    F = as_tensor(F)
    lead = F.shape[:-2]
    val, grad = fisher.log_normalizer_and_grad(F.data)
    grad = grad.reshape(F.shape)
    return _node(val.reshape(lead), (F,), lambda g: (np.asarray(g)[..., None, None] * grad,))
