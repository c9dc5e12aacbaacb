"""Quaternion and rotation-matrix utilities.

Quaternions are stored scalar-first, ``(w, x, y, z)``, as float64 arrays whose
last axis has length 4. Rotation matrices act on column vectors.
"""
from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class AmbiguousAverageWarning(UserWarning):
    """Raised (as a warning) when the dominant eigenvalue is not unique."""


class EigPair(NamedTuple):
    value: float
    vector: np.ndarray
    ambiguous: bool


def normalize_quat(q, tol: float = 1e-3) -> np.ndarray:
    """Renormalize quaternions whose norm is within ``tol`` of one."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(np.abs(n - 1.0) > tol):
        raise ValueError(f"quaternion norm {n.ravel()} is not within {tol} of 1")
    return q / n


def canonical_sign(q) -> np.ndarray:
    """Flip quaternions so that w >= 0 (first nonzero component positive if w == 0)."""
    q = np.array(q, dtype=np.float64, copy=True)
    flat = q.reshape(-1, 4)
    for row in flat:
        for c in row:
            if c != 0.0:
                if c < 0.0:
                    row *= -1.0
                break
    return flat.reshape(q.shape)


def attitude(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (batched over leading axes)."""
    q = normalize_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
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
    return R


def quat_from_matrix(R) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        k = int(np.argmax([tr, m[0, 0], m[1, 1], m[2, 2]]))
        if k == 0:
            s = 2.0 * np.sqrt(max(1.0 + tr, 0.0))
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif k == 1:
            s = 2.0 * np.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0))
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif k == 2:
            s = 2.0 * np.sqrt(max(1.0 + m[1, 1] - m[0, 0] - m[2, 2], 0.0))
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(max(1.0 + m[2, 2] - m[0, 0] - m[1, 1], 0.0))
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[n] = q / np.linalg.norm(q)
    return canonical_sign(out).reshape(R.shape[:-2] + (4,))


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    axis = np.where(n > 0, axis / np.where(n > 0, n, 1.0), 0.0)
    half = 0.5 * angle[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def rotvec_to_matrix(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec, axis=-1)
    return attitude(axis_angle_to_quat(rotvec, angle))


def geodesic_angle(R1, R2) -> np.ndarray:
    """Angle (radians) of the relative rotation R1^T R2."""
    R1 = np.asarray(R1)
    R2 = np.asarray(R2)
    tr = np.einsum("...ji,...ji->...", R1, R2)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def random_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform unit quaternions (normalized 4D Gaussians)."""
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    return attitude(random_quaternions(n, rng))


def jacobi_eigh(m, tol: float = 1e-15, max_sweeps: int = 50):
    """Full eigendecomposition of a small symmetric matrix by cyclic Jacobi.

    Returns ``(values, vectors)`` with eigenvectors in the columns, sorted by
    decreasing eigenvalue.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    big = np.max(np.abs(a)) if a.size else 0.0
    unit = big if big > 0 else 1.0
    a /= unit  # work at unit scale so squares cannot overflow
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum((a - np.diag(np.diag(a))) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0:
                    t = 1.0
                elif abs(theta) > 1e150:  # theta^2 would overflow; t ~ 1/(2 theta)
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # a <- J^T a J with J the (p, q) plane rotation
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    values = np.diag(a) * unit
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def symmetric4_eig_max(m, tie_tol: float = 1e-12) -> EigPair:
    """Dominant eigenpair of a symmetric 4x4 matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if np.max(np.abs(m - m.T)) > 1e-10:
        raise ValueError("matrix is not symmetric")
    m = 0.5 * (m + m.T)
    values, vectors = jacobi_eigh(m)
    vec = vectors[:, 0] / np.linalg.norm(vectors[:, 0])
    ambiguous = bool(values[0] - values[1] <= tie_tol * max(1.0, abs(values[0])))
    return EigPair(float(values[0]), vec, ambiguous)


def weighted_average_rotation(quats, weights) -> np.ndarray:
    """Chordal-L2 weighted mean of rotations given as quaternions.

    Minimizes ``sum_i w_i ||A(q) - A(q_i)||_F^2`` over unit quaternions; the
    minimizer is the dominant eigenvector of ``sum_i w_i q_i q_i^T``. The
    result is sign-normalized so that w >= 0.
    """
    quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if quats.shape[0] != weights.shape[0]:
        raise ValueError("quats and weights have different lengths")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    if not np.any(weights > 0):
        raise ValueError("all weights are zero")
    quats = normalize_quat(quats)
    acc = np.einsum("i,ij,ik->jk", weights / weights.sum(), quats, quats)
    pair = symmetric4_eig_max(0.5 * (acc + acc.T))
    if pair.ambiguous:
        warnings.warn("rotation average is ambiguous (tied eigenvalues)", AmbiguousAverageWarning, stacklevel=2)
    return canonical_sign(pair.vector)


def chordal_objective(q, quats, weights) -> float:
    """sum_i w_i ||A(q) - A(q_i)||_F^2."""
    R = attitude(q)
    Rs = attitude(np.asarray(quats))
    d = Rs - R
    return float(np.sum(np.asarray(weights) * np.einsum("nij,nij->n", d, d)))
