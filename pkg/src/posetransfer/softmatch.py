"""Soft and hard keypoint matching.

Sinkhorn plans use uniform marginals with total mass one: rows sum to
``1/K1`` and columns to ``1/K2``.
"""
from __future__ import annotations

import hashlib
import re
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

SINKHORN_ITERS = 50
SINKHORN_TOL = 1e-6
GT_TEMPERATURE = 0.1
EMBED_DIM = 64

# bone-name word -> canonical part token
SYNONYMS: Dict[str, str] = {
    "arm": "limb",
    "upperarm": "limb",
    "forearm": "limb",
    "hand": "limb",
    "wing": "limb",
    "foreleg": "limb",
    "fin": "limb",
    "flipper": "limb",
    "leg": "leg",
    "thigh": "leg",
    "shin": "leg",
    "calf": "leg",
    "claw": "leg",
    "talon": "leg",
    "hindleg": "leg",
    "foot": "leg",
    "spine": "spine",
    "torso": "spine",
    "chest": "spine",
    "body": "spine",
    "pelvis": "spine",
    "hips": "spine",
    "back": "spine",
    "head": "head",
    "skull": "head",
    "neck": "neck",
    "tail": "tail",
    "l": "left",
    "r": "right",
    "left": "left",
    "right": "right",
}


def sinkhorn_log(logits, iters: int = SINKHORN_ITERS, tol: float = SINKHORN_TOL) -> np.ndarray:
    """Log-domain Sinkhorn on a matrix of log-affinities; returns the plan."""
    x = np.array(logits, dtype=np.float64, copy=True)
    if x.ndim != 2 or x.size == 0:
        raise ValueError("expected a non-empty matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("affinity contains NaN or Inf")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    K1, K2 = x.shape
    log_r = -np.log(K1)
    log_c = -np.log(K2)
    x -= x.max()
    for _ in range(iters):
        x += log_r - logsumexp(x, axis=1, keepdims=True)
        x += log_c - logsumexp(x, axis=0, keepdims=True)
        p = np.exp(x)
        if np.max(np.abs(p.sum(axis=1) - 1.0 / K1)) < tol:
            break
    return np.exp(x)


def sinkhorn(s, iters: int = SINKHORN_ITERS, tol: float = SINKHORN_TOL) -> np.ndarray:
    """Scale a positive affinity matrix toward uniform row/column marginals."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("affinity contains NaN or Inf")
    if np.any(s <= 0):
        raise ValueError("affinity entries must be positive")
    return sinkhorn_log(np.log(s), iters, tol)


def _assign(score: np.ndarray) -> np.ndarray:
    """Column of each row in a maximum-score assignment (rows <= cols)."""
    rows, cols = linear_sum_assignment(score, maximize=True)
    out = np.empty(score.shape[0], dtype=int)
    out[rows] = cols
    return out


def hungarian(score) -> list:
    """Maximum-score one-to-one assignment of size min(K1, K2).

    Returns sorted ``(i, j)`` pairs. When several assignments are optimal
    (exactly tied scores), the lexicographically smallest column sequence is
    returned.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.size == 0:
        raise ValueError("score matrix must be non-empty and 2D")
    if not np.all(np.isfinite(score)):
        raise ValueError("score matrix has non-finite entries")
    transpose = score.shape[0] > score.shape[1]
    s = score.T if transpose else score  # rows <= cols
    cols = _assign(s)
    if np.unique(s).size < s.size:
        cols = _lexicographic_refine(s, cols)
    pairs = [(int(j), int(i)) if transpose else (int(i), int(j)) for i, j in enumerate(cols)]
    return sorted(pairs)


def _lexicographic_refine(s: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Among optimal assignments pick the lexicographically smallest (rows <= cols)."""
    n_rows, n_cols = s.shape
    best = s[np.arange(n_rows), cols].sum()
    tol = 1e-9 * max(1.0, np.abs(s).max() * n_rows)
    fixed: list = []
    free_cols = list(range(n_cols))
    total = 0.0
    for i in range(n_rows):
        rest_rows = np.arange(i + 1, n_rows)
        for j in free_cols:
            remaining = [c for c in free_cols if c != j]
            value = total + s[i, j]
            if rest_rows.size:
                sub = s[np.ix_(rest_rows, remaining)]
                sub_cols = _assign(sub)
                value += sub[np.arange(rest_rows.size), sub_cols].sum()
            if value >= best - tol:
                fixed.append(j)
                total += s[i, j]
                free_cols = remaining
                break
    return np.asarray(fixed, dtype=int)


def assignment_matrix(pairs, shape) -> np.ndarray:
    m = np.zeros(shape)
    for i, j in pairs:
        m[i, j] = 1.0
    return m


def canonical_token(name: str) -> str:
    """Map a bone name onto the shared part vocabulary, e.g. 'LeftWing_2' -> 'left_limb_2'."""
    s = re.sub(r"([a-z])([A-Z])", r"\1_\2", name.strip())
    s = re.sub(r"([A-Za-z])(\d)", r"\1_\2", s)
    words = [w for w in re.split(r"[^a-z0-9]+", s.lower()) if w]
    return "_".join(SYNONYMS.get(w, w) for w in words) or name.lower()


def trigram_vector(token: str, dim: int = EMBED_DIM) -> np.ndarray:
    """L2-normalized signed hashing of character trigrams of ``#token#``."""
    padded = f"#{token}#"
    vec = np.zeros(dim)
    for k in range(max(len(padded) - 2, 1)):
        gram = padded[k : k + 3].encode("utf-8")
        h = hashlib.blake2b(gram, digest_size=8).digest()
        idx = int.from_bytes(h[:4], "little") % dim
        sign = 1.0 if h[4] & 1 else -1.0
        vec[idx] += sign
    n = np.linalg.norm(vec)
    if n == 0:
        vec[0] = 1.0
        n = 1.0
    return vec / n


class LabelEmbeddings:
    """Unit vectors per keypoint name, falling back to the lexicon/trigram embedder."""

    def __init__(self, table: Optional[Mapping[str, Iterable[float]]] = None, dim: int = EMBED_DIM):
        self.dim = dim
        self._table: Dict[str, np.ndarray] = {}
        for name, vec in (table or {}).items():
            v = np.asarray(list(vec), dtype=np.float64)
            n = np.linalg.norm(v)
            if n == 0:
                raise ValueError(f"zero embedding for {name!r}")
            self._table[name] = v / n
        dims = {v.shape[0] for v in self._table.values()}
        if len(dims) > 1:
            raise ValueError("embedding vectors have inconsistent dimensions")
        if dims:
            self.dim = dims.pop()

    def __contains__(self, name: str) -> bool:
        return name in self._table

    def __getitem__(self, name: str) -> np.ndarray:
        vec = self._table.get(name)
        if vec is None:
            vec = trigram_vector(canonical_token(name), self.dim)
        return vec

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self[n] for n in names])

    @classmethod
    def load_tsv(cls, path) -> "LabelEmbeddings":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    name, values = line.split("\t")
                    table[name] = [float(x) for x in values.split(",")]
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed embedding record") from exc
        return cls(table)

    def save_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name, vec in self._table.items():
                fh.write(name + "\t" + ",".join(repr(float(x)) for x in vec) + "\n")


def text_similarity(src_names, tgt_names, emb: Optional[LabelEmbeddings] = None) -> np.ndarray:
    """Cosine similarity between label embeddings, shape (K1, K2)."""
    emb = emb or LabelEmbeddings()
    a = emb.matrix(src_names)
    b = emb.matrix(tgt_names)
    return np.clip(a @ b.T, -1.0, 1.0)


def build_gt_targets(s_cos, tau: float = GT_TEMPERATURE, iters: int = SINKHORN_ITERS, tol: float = SINKHORN_TOL):
    """Soft (Sinkhorn) and hard (Hungarian, mass-one) correspondence targets."""
    s_cos = np.asarray(s_cos, dtype=np.float64)
    m_sink = sinkhorn_log(s_cos / tau, iters, tol)
    pairs = hungarian(s_cos)
    m_hung = assignment_matrix(pairs, s_cos.shape) / len(pairs)
    return m_sink, m_hung
