"""As-rigid-as-possible refinement with soft keypoint-centroid constraints.

Energy, with uniform edge weights over directed 1-ring edges (i, j)::

    E(V, R) = sum_ij |(v_i - v_j) - R_i (u_i - u_j)|^2
              + lam |A V - P|^2 + eps |V - V0|^2

where u are the rest (canonical) positions, A maps vertices to skin-weighted
keypoint centroids and P are their targets. Local steps fit each R_i by
Procrustes; global steps solve the normal equations
``(2 L + lam A^T A + eps I) V = b + lam A^T P + eps V0`` with
``b_i = sum_j (R_i + R_j)(u_i - u_j)``. Both steps are exact minimizations,
so the energy never increases.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ..meshcore import Mesh, Rig


@dataclass
class ArapResult:
    mesh: Mesh
    energies: List[float] = field(default_factory=list)


def _edges(mesh: Mesh):
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    uniq, counts = np.unique(und, axis=0, return_counts=True)
    if np.any(counts > 2):
        warnings.warn("non-manifold edges found; uniform weights are used throughout", RuntimeWarning, stacklevel=3)
    return uniq


def centroid_operator(rig: Rig) -> sp.csr_matrix:
    """(K, N) rows of normalized skin weights; massless keypoints get empty rows."""
    W = rig.skin_weights
    mass = W.sum(axis=0)
    scale = np.where(mass > 0, 1.0 / np.where(mass > 0, mass, 1.0), 0.0)
    return sp.csr_matrix((W * scale).T)


class ArapSolver:
    def __init__(self, rest: Mesh, rig: Rig, keypoint_weight: float = 10.0, anchor_weight: float = 1e-3):
        self.rest = rest.vertices
        self.faces = rest.faces
        N = rest.n_vertices
        e = _edges(rest)
        self.i = np.concatenate([e[:, 0], e[:, 1]])  # directed edges i -> j
        self.j = np.concatenate([e[:, 1], e[:, 0]])
        ones = np.ones(self.i.size)
        adj = sp.csr_matrix((ones, (self.i, self.j)), shape=(N, N))
        deg = np.asarray(adj.sum(axis=1)).ravel()
        self.L = sp.diags(deg) - adj
        self.A = centroid_operator(rig)
        self.lam = float(keypoint_weight)
        self.eps = float(anchor_weight)
        system = 2.0 * self.L + self.lam * (self.A.T @ self.A) + self.eps * sp.identity(N)
        self._lu = splu(sp.csc_matrix(system))
        self.rest_edges = self.rest[self.i] - self.rest[self.j]

    def rotations(self, V) -> np.ndarray:
        cur = V[self.i] - V[self.j]
        cov = np.zeros((V.shape[0], 3, 3))
        np.add.at(cov, self.i, self.rest_edges[:, :, None] * cur[:, None, :])
        U, _, Vt = np.linalg.svd(cov)
        R = np.einsum("nji,nkj->nik", Vt, U)  # V U^T
        flip = np.linalg.det(R) < 0
        if flip.any():
            Vt2 = Vt[flip].copy()
            Vt2[:, 2, :] *= -1
            R[flip] = np.einsum("nji,nkj->nik", Vt2, U[flip])
        return R

    def energy(self, V, R, P, V0) -> float:
        d = (V[self.i] - V[self.j]) - np.einsum("nab,nb->na", R[self.i], self.rest_edges)
        e = np.sum(d * d)
        e += self.lam * np.sum((self.A @ V - P) ** 2)
        e += self.eps * np.sum((V - V0) ** 2)
        return float(e)

    def solve(self, R, P, V0) -> np.ndarray:
        rhs_e = np.einsum("nab,nb->na", R[self.i] + R[self.j], self.rest_edges)
        b = np.zeros_like(V0)
        np.add.at(b, self.i, rhs_e)
        rhs = b + self.lam * (self.A.T @ P) + self.eps * V0
        return self._lu.solve(rhs)


def arap_refine(mesh: Mesh, reference_canonical: Mesh, rig: Rig, keypoint_targets, iters: int = 10,
                keypoint_weight: float = 10.0, anchor_weight: float = 1e-3) -> ArapResult:
    """Local/global ARAP starting from ``mesh``; returns the refined mesh and energy per iteration.

    ``energies[0]`` is the starting energy; each later entry follows one
    global + local step.
    """
    if mesh.faces.shape != reference_canonical.faces.shape or not np.array_equal(mesh.faces, reference_canonical.faces):
        raise ValueError("mesh and canonical mesh must share connectivity")
    rig.check_mesh(mesh)
    P = np.asarray(keypoint_targets, dtype=np.float64).reshape(rig.n_keypoints, 3)
    solver = ArapSolver(reference_canonical, rig, keypoint_weight, anchor_weight)
    V0 = mesh.vertices.copy()
    V = V0
    R = solver.rotations(V)
    energies = [solver.energy(V, R, P, V0)]
    for _ in range(iters):
        V = solver.solve(R, P, V0)
        R = solver.rotations(V)
        energies.append(solver.energy(V, R, P, V0))
    return ArapResult(mesh.with_vertices(V), energies)
