"""Deterministic geometry tokens standing in for a learned shape encoder.

A mesh is centred on its vertex mean and scaled so the farthest vertex sits
on the unit sphere. ``n_tokens`` query vertices are chosen by farthest-point
sampling; each query emits

    [position (3), mean unit normal of the k nearest faces (3),
     mean / max distance to the k nearest other vertices (2),
     fraction of vertices within ``radius`` (1), zero padding]

Only translation and uniform scale are normalized away, so a rigid rotation
of the whole mesh changes the tokens.

The token statistics are smooth in the vertex positions once the discrete
choices (sampled queries, neighbour sets, farthest vertex, radius counts)
are fixed. :func:`select` records those choices and :func:`tokens_tensor`
re-evaluates the tokens differentiably for a fixed :class:`Selection`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .meshcore import Mesh
from .nn import autodiff as ad
from .nn.optim import load_checkpoint, save_checkpoint

N_STATS = 9
_AREA_EPS = 1e-24  # keeps zero-area faces finite
_QUANT = 1e9  # distance keys are rounded to 1e-9 so symmetric ties break by index


@dataclass(frozen=True)
class ShapeFeatConfig:
    n_tokens: int = 16
    dim: int = 64
    k_faces: int = 8
    k_vertices: int = 8
    radius: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.dim < N_STATS:
            raise ValueError(f"token dim must be >= {N_STATS}")
        if self.n_tokens < 1 or self.k_faces < 1 or self.k_vertices < 1:
            raise ValueError("token and neighbour counts must be >= 1")


@dataclass(frozen=True, eq=False)
class ShapeTokens:
    tokens: np.ndarray  # (n_tokens, dim)
    tag: str = ""

    @property
    def shape(self):
        return self.tokens.shape


@dataclass(frozen=True, eq=False)
class Selection:
    """Frozen discrete choices behind one token extraction."""

    far_vertex: int
    queries: np.ndarray  # (L,) vertex indices
    face_nbrs: np.ndarray  # (L, kf) face indices
    vert_nbrs: np.ndarray  # (L, kv) vertex indices
    far_nbr: np.ndarray  # (L,) position within vert_nbrs of the farthest neighbour
    density: np.ndarray  # (L,) fraction of vertices within radius


def normalize_vertices(v: np.ndarray):
    """Returns (normalized vertices, centre, scale)."""
    center = v.mean(axis=0)
    r = np.linalg.norm(v - center, axis=1)
    scale = r.max()
    if scale <= 0:
        raise ValueError("mesh has zero extent")
    return (v - center) / scale, center, scale


def _key(d):
    return np.round(d * _QUANT)


def farthest_point_sample(points: np.ndarray, n: int, start: int) -> np.ndarray:
    N = points.shape[0]
    idx = [start % N]
    dist = np.linalg.norm(points - points[idx[0]], axis=1)
    for _ in range(min(n, N) - 1):
        nxt = int(np.argmax(_key(dist)))
        idx.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    if n > N:
        warnings.warn(f"mesh has {N} vertices < {n} tokens; sampling with replacement", RuntimeWarning, stacklevel=3)
        rng = np.random.default_rng(start)
        idx += [int(i) for i in rng.integers(0, N, size=n - N)]
    return np.asarray(idx, dtype=np.int64)


def _nearest(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, ties broken by index."""
    order = np.argsort(_key(dist), axis=1, kind="stable")
    return order[:, :k]


def select(mesh: Mesh, cfg: ShapeFeatConfig = ShapeFeatConfig()) -> Selection:
    v = mesh.vertices
    p, _, _ = normalize_vertices(v)
    far = int(np.argmax(_key(np.linalg.norm(p, axis=1))))
    q = farthest_point_sample(p, cfg.n_tokens, cfg.seed)
    qp = p[q]
    f = mesh.faces
    if f.shape[0] == 0:
        raise ValueError("mesh has no faces")
    cent = p[f].mean(axis=1)
    dface = np.linalg.norm(qp[:, None, :] - cent[None], axis=2)
    face_nbrs = _nearest(dface, min(cfg.k_faces, f.shape[0]))
    dvert = np.linalg.norm(qp[:, None, :] - p[None], axis=2)
    density = (dvert <= cfg.radius).mean(axis=1)
    dvert_other = dvert.copy()
    dvert_other[np.arange(q.size), q] = np.inf
    kv = min(cfg.k_vertices, max(v.shape[0] - 1, 1))
    vert_nbrs = _nearest(dvert_other, kv)
    nd = np.take_along_axis(dvert, vert_nbrs, axis=1)
    far_nbr = np.argmax(_key(nd), axis=1)
    return Selection(far, q, face_nbrs, vert_nbrs, far_nbr, density)


def _stats_numpy(v, faces, sel: Selection, dim: int) -> np.ndarray:
    center = v.mean(axis=0)
    p = (v - center) / np.linalg.norm(v[sel.far_vertex] - center)
    qp = p[sel.queries]
    a, b, c = p[faces[:, 0]], p[faces[:, 1]], p[faces[:, 2]]
    n = np.cross(b - a, c - a)
    n = n / np.sqrt(np.sum(n * n, axis=1, keepdims=True) + _AREA_EPS)
    normals = n[sel.face_nbrs].mean(axis=1)
    nd = np.linalg.norm(p[sel.vert_nbrs] - qp[:, None, :], axis=2)
    out = np.zeros((sel.queries.size, dim))
    out[:, 0:3] = qp
    out[:, 3:6] = normals
    out[:, 6] = nd.mean(axis=1)
    out[:, 7] = nd[np.arange(nd.shape[0]), sel.far_nbr]
    out[:, 8] = sel.density
    return out


def encode_shape(mesh: Mesh, cfg: ShapeFeatConfig = ShapeFeatConfig(), tag: str = "") -> ShapeTokens:
    sel = select(mesh, cfg)
    return ShapeTokens(_stats_numpy(mesh.vertices, mesh.faces, sel, cfg.dim), tag)


def tokens_tensor(vertices, faces: np.ndarray, sel: Selection, dim: int) -> ad.Tensor:
    """Differentiable token matrix for fixed discrete choices.

    Matches :func:`encode_shape` exactly when ``sel`` was computed from the
    same vertices.
    """
    v = ad.as_tensor(vertices)
    center = ad.mean(v, axis=0, keepdims=True)
    vc = v - center
    scale = ad.norm(vc[sel.far_vertex])
    p = vc / scale
    qp = p[sel.queries]
    a, b, c = p[faces[:, 0]], p[faces[:, 1]], p[faces[:, 2]]
    n = ad.cross(b - a, c - a)
    n = n / ad.norm(n, axis=1, keepdims=True, eps=_AREA_EPS)
    normals = ad.mean(n[sel.face_nbrs], axis=1)
    L, kv = sel.vert_nbrs.shape
    diff = p[sel.vert_nbrs] - ad.reshape(qp, (L, 1, 3))
    nd = ad.norm(diff, axis=2)
    mean_d = ad.mean(nd, axis=1, keepdims=True)
    max_d = ad.reshape(nd[np.arange(L), sel.far_nbr], (L, 1))
    dens = ad.Tensor(sel.density[:, None])
    pad = ad.Tensor(np.zeros((L, dim - N_STATS)))
    return ad.concat([qp, normals, mean_d, max_d, dens, pad], axis=1)


def residual_feature(posed: ShapeTokens, canonical: ShapeTokens) -> ShapeTokens:
    if posed.shape != canonical.shape:
        raise ValueError(f"token shapes differ: {posed.shape} vs {canonical.shape}")
    return ShapeTokens(posed.tokens - canonical.tokens, "residual")


def feature_loss(reconstructed: Mesh, reference: Mesh, cfg: ShapeFeatConfig = ShapeFeatConfig()) -> float:
    """Squared Frobenius distance between the two meshes' tokens."""
    d = encode_shape(reconstructed, cfg).tokens - encode_shape(reference, cfg).tokens
    return float(np.sum(d * d))


def save_token_sidecar(path, tokens: Dict[str, ShapeTokens]) -> None:
    save_checkpoint(path, {k: t.tokens for k, t in tokens.items()}, meta={"kind": "shape-tokens"})


def load_token_sidecar(path, cfg: Optional[ShapeFeatConfig] = None) -> Dict[str, ShapeTokens]:
    """Precomputed tokens from an external encoder, keyed by mesh name."""
    state, _ = load_checkpoint(path)
    out = {}
    for k, arr in state.items():
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ValueError(f"{path}: tokens {k!r} must be a finite matrix")
        if cfg is not None and arr.shape != (cfg.n_tokens, cfg.dim):
            raise ValueError(f"{path}: tokens {k!r} have shape {arr.shape}, expected {(cfg.n_tokens, cfg.dim)}")
        out[k] = ShapeTokens(arr, k)
    return out
