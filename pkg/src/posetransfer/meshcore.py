"""Character geometry, rigs, linear blend skinning and transform estimation.

Transform convention: keypoint ``k`` maps a canonical vertex ``v`` to
``R_k (v - c_k) + t_k`` where ``t_k`` is the absolute posed position of the
keypoint frame. The rest pose is therefore ``(identity, t_k = c_k)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import so3

DEGENERATE_MASS = 1e-8
SUPPORT_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {v.shape}")
        if v.shape[0] < 3:
            raise ValueError("a mesh needs at least 3 vertices")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face (repeated vertex index)")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Rig:
    """Keypoints plus per-vertex skin weights.

    ``skin_weights`` is stored dense, shape (N, K); rows are convex weights.
    """

    keypoints: np.ndarray
    names: tuple
    skin_weights: np.ndarray
    parents: Optional[tuple] = None

    def __post_init__(self):
        c = np.ascontiguousarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        w = np.ascontiguousarray(self.skin_weights, dtype=np.float64)
        names = tuple(str(n) for n in self.names)
        K = c.shape[0]
        if K == 0:
            raise ValueError("rig has no keypoints")
        if len(names) != K:
            raise ValueError(f"{len(names)} names for {K} keypoints")
        if w.ndim != 2 or w.shape[1] != K:
            raise ValueError(f"skin weights must be (N, {K}), got {w.shape}")
        if np.any(w < 0):
            raise ValueError("skin weights must be non-negative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("skin weights must sum to 1 per vertex")
        if self.parents is not None:
            parents = tuple(int(p) for p in self.parents)
            if len(parents) != K or any(p < -1 or p >= K for p in parents):
                raise ValueError("invalid parent indices")
            object.__setattr__(self, "parents", parents)
        c.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "keypoints", c)
        object.__setattr__(self, "skin_weights", w)
        object.__setattr__(self, "names", names)

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]

    @classmethod
    def from_sparse(cls, keypoints, names, sparse_weights, parents=None) -> "Rig":
        """Build from a per-vertex list of ``(keypoint_index, weight)`` pairs."""
        K = len(keypoints)
        w = np.zeros((len(sparse_weights), K))
        for i, pairs in enumerate(sparse_weights):
            for k, wk in pairs:
                if not 0 <= int(k) < K:
                    raise ValueError(f"vertex {i}: keypoint index {k} out of range")
                w[i, int(k)] += float(wk)
        return cls(keypoints, names, w, parents)

    def sparse_weights(self, eps: float = 0.0) -> list:
        return [[(int(k), float(row[k])) for k in np.nonzero(row > eps)[0]] for row in self.skin_weights]

    def check_mesh(self, mesh: Mesh) -> None:
        if self.skin_weights.shape[0] != mesh.n_vertices:
            raise ValueError(
                f"rig has weights for {self.skin_weights.shape[0]} vertices, mesh has {mesh.n_vertices}"
            )


@dataclass(frozen=True, eq=False)
class PoseTransforms:
    rotations: np.ndarray  # (K, 4) unit quaternions
    translations: np.ndarray  # (K, 3)
    degenerate: tuple = field(default=())

    def __post_init__(self):
        q = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        t = np.ascontiguousarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if q.shape[0] != t.shape[0]:
            raise ValueError("rotation and translation counts differ")
        if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-9):
            raise ValueError("rotations must be unit quaternions")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotations", q)
        object.__setattr__(self, "translations", t)

    def __len__(self) -> int:
        return self.rotations.shape[0]

    @property
    def matrices(self) -> np.ndarray:
        return so3.attitude(self.rotations)

    @classmethod
    def rest(cls, rig: Rig) -> "PoseTransforms":
        K = rig.n_keypoints
        return cls(np.tile(so3.IDENTITY_QUAT, (K, 1)), rig.keypoints.copy())

    @classmethod
    def from_matrices(cls, R, t, degenerate=()) -> "PoseTransforms":
        return cls(so3.quat_from_matrix(R).reshape(-1, 4), t, tuple(degenerate))

    def compose_left(self, R_g, t_g) -> "PoseTransforms":
        """Apply a global rigid map after every per-keypoint transform."""
        R = np.einsum("ij,kjl->kil", R_g, self.matrices)
        t = self.translations @ np.asarray(R_g).T + np.asarray(t_g)
        return PoseTransforms.from_matrices(R, t)


def _lbs(rest_vertices, keypoints, weights, R, t):
    offsets = rest_vertices[:, None, :] - keypoints[None, :, :]  # (N, K, 3)
    moved = np.einsum("kij,nkj->nki", R, offsets) + t[None]
    return np.einsum("nk,nki->ni", weights, moved)


def apply_lbs(canonical: Mesh, rig: Rig, transforms: PoseTransforms) -> Mesh:
    """Deform the canonical mesh: v_i = sum_k w_ik (R_k (v_i - c_k) + t_k)."""
    rig.check_mesh(canonical)
    if len(transforms) != rig.n_keypoints:
        raise ValueError(f"{len(transforms)} transforms for {rig.n_keypoints} keypoints")
    v = _lbs(canonical.vertices, rig.keypoints, rig.skin_weights, transforms.matrices, transforms.translations)
    return canonical.with_vertices(v)


def posed_keypoints(posed: Mesh, rig: Rig) -> np.ndarray:
    """Skin-weighted vertex centroids; massless keypoints keep their canonical position."""
    rig.check_mesh(posed)
    w = rig.skin_weights
    mass = w.sum(axis=0)
    out = rig.keypoints.copy()
    ok = mass >= DEGENERATE_MASS
    out[ok] = (w[:, ok].T @ posed.vertices) / mass[ok, None]
    return out


def _procrustes(src, dst, w):
    """Weighted rigid fit dst ~ R src + t. Returns (R, t, rank_ok)."""
    ws = w / w.sum()
    mu_s = ws @ src
    mu_d = ws @ dst
    H = (src - mu_s).T @ ((dst - mu_d) * ws[:, None])
    U, S, Vt = np.linalg.svd(H)
    rank_ok = S[1] > 1e-12 * max(S[0], 1e-300)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s, rank_ok


def estimate_keypoint_transforms(
    canonical: Mesh, posed: Mesh, rig: Rig, refine: bool = True
) -> PoseTransforms:
    """Per-keypoint rigid transforms explaining ``posed`` as a skinned ``canonical``.

    Each keypoint first gets a skin-weighted Procrustes fit of its offsets
    ``v_i - c_k`` onto the posed vertices. With ``refine`` the fits are then
    polished jointly through the LBS model (linear solve for unconstrained
    3x4 maps, projection to SO(3), translation re-solve), and kept only if
    they lower the reconstruction residual.
    """
    rig.check_mesh(canonical)
    rig.check_mesh(posed)
    if canonical.faces.shape != posed.faces.shape or not np.array_equal(canonical.faces, posed.faces):
        raise ValueError("canonical and posed meshes must share faces")
    V0 = canonical.vertices
    V = posed.vertices
    W = rig.skin_weights
    C = rig.keypoints
    K = rig.n_keypoints
    R = np.tile(np.eye(3), (K, 1, 1))
    t = C.copy()
    degenerate = []
    for k in range(K):
        w = W[:, k]
        support = w > SUPPORT_EPS
        if w.sum() < DEGENERATE_MASS or support.sum() < 3:
            degenerate.append(k)
            continue
        Rk, tk, rank_ok = _procrustes(V0[support] - C[k], V[support], w[support])
        if not rank_ok:
            degenerate.append(k)
            continue
        R[k], t[k] = Rk, tk

    if refine:
        active = np.array([k for k in range(K) if k not in degenerate], dtype=int)
        if active.size:
            R, t = _refine_joint(V0, V, W, C, R, t, active)
    return PoseTransforms.from_matrices(R, t, degenerate)


def _refine_joint(V0, V, W, C, R, t, active):
    def residual(Rx, tx):
        return np.sum((_lbs(V0, C, W, Rx, tx) - V) ** 2)

    base = residual(R, t)
    inactive = np.setdiff1d(np.arange(C.shape[0]), active)
    fixed = np.zeros_like(V)
    if inactive.size:
        fixed = _lbs(V0, C[inactive], W[:, inactive], R[inactive], t[inactive])
    offsets = V0[:, None, :] - C[None, active, :]  # (N, A, 3)
    Wa = W[:, active]
    design = np.concatenate([Wa[:, :, None] * offsets, Wa[:, :, None]], axis=2).reshape(V.shape[0], -1)
    sol, *_ = np.linalg.lstsq(design, V - fixed, rcond=None)
    sol = sol.reshape(active.size, 4, 3)
    R2 = R.copy()
    for n, k in enumerate(active):
        M = sol[n, :3, :].T
        U, _, Vt = np.linalg.svd(M)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
        R2[k] = U @ D @ Vt
    rotated = np.einsum("kij,nkj->nki", R2[active], offsets)
    rhs = V - fixed - np.einsum("nk,nki->ni", Wa, rotated)
    tsol, *_ = np.linalg.lstsq(Wa, rhs, rcond=None)
    t2 = t.copy()
    t2[active] = tsol
    if residual(R2, t2) <= base:
        return R2, t2
    return R, t
