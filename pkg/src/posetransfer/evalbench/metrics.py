"""Pose accuracy (PMD) and distortion (ELS) between meshes with shared topology."""
from __future__ import annotations

import warnings

import numpy as np

from ..meshcore import Mesh


def pmd(predicted: Mesh, reference: Mesh) -> float:
    """100 x mean squared per-vertex distance."""
    p, r = predicted.vertices, reference.vertices
    if p.shape != r.shape:
        raise ValueError(f"vertex counts differ: {p.shape[0]} vs {r.shape[0]}")
    return float(100.0 * np.mean(np.sum((p - r) ** 2, axis=1)))


def edge_ratios(predicted: Mesh, reference: Mesh) -> np.ndarray:
    """min(l_pred / l_ref, l_ref / l_pred) per unique edge with non-zero reference length."""
    if predicted.faces.shape != reference.faces.shape or not np.array_equal(predicted.faces, reference.faces):
        raise ValueError("meshes must share faces")
    e = reference.edges()
    lr = np.linalg.norm(reference.vertices[e[:, 0]] - reference.vertices[e[:, 1]], axis=1)
    lp = np.linalg.norm(predicted.vertices[e[:, 0]] - predicted.vertices[e[:, 1]], axis=1)
    zero = lr == 0
    if zero.any():
        warnings.warn(f"skipping {int(zero.sum())} zero-length reference edges", RuntimeWarning, stacklevel=2)
    lr, lp = lr[~zero], lp[~zero]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lp > 0, np.minimum(lp / lr, lr / np.where(lp > 0, lp, 1.0)), 0.0)
    return ratio


def els(predicted: Mesh, reference: Mesh) -> float:
    """Mean symmetric edge-length ratio; 1 means every edge keeps its length."""
    r = edge_ratios(predicted, reference)
    if r.size == 0:
        raise ValueError("reference mesh has no edges of non-zero length")
    return float(np.mean(r))
