"""The correspondence, transfer and prior transformers.

All three share the same layout: a keypoint encoder MLP produces one token
per keypoint, a shape projector produces one token per shape token, and the
concatenation runs through a pre-norm transformer encoder. Keypoint inputs
are expressed in the frame of their own canonical mesh (vertex mean at the
origin, farthest vertex at distance one).
"""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from ..fisher import S_MAX
from ..nn import autodiff as ad
from ..nn.autodiff import Tensor
from ..nn.layers import MLP, CrossAttentionBlock, LayerNorm, Linear, Module, TransformerConfig, TransformerEncoder
from ..shapefeat import normalize_vertices
from .bundle import CharacterBundle

TRANSFER_KP_INPUTS = 13  # c_j, c_bar_j, t_bar_j, q_bar_j


def mesh_frame(mesh):
    """(centre, scale) of the unit bounding-sphere normalization."""
    _, c, s = normalize_vertices(mesh.vertices)
    return c, s


def pad_stack(arrays: Sequence[np.ndarray], length: int = None):
    """Stack (K_b, ...) arrays into (B, Kmax, ...) plus a boolean mask."""
    length = length or max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), length) + arrays[0].shape[1:])
    mask = np.zeros((len(arrays), length), dtype=bool)
    for b, a in enumerate(arrays):
        out[b, : a.shape[0]] = a
        mask[b, : a.shape[0]] = True
    return out, mask


def pad_tensors(tensors: Sequence[Tensor], length: int) -> Tensor:
    """Differentiable version of :func:`pad_stack` (values only)."""
    rows = []
    for t in tensors:
        t = ad.as_tensor(t)
        extra = length - t.shape[0]
        if extra:
            t = ad.concat([t, Tensor(np.zeros((extra,) + t.shape[1:]))], axis=0)
        rows.append(t)
    return ad.stack(rows, axis=0)


def normalized_keypoints(bundle: CharacterBundle, points=None) -> np.ndarray:
    c, s = mesh_frame(bundle.mesh)
    pts = bundle.rig.keypoints if points is None else points
    return (pts - c) / s


class _TokenTransformer(Module):
    def _encode(self, kp_tokens: Tensor, kp_mask, shape_tokens: Tensor) -> Tensor:
        B, L = shape_tokens.shape[0], shape_tokens.shape[1]
        x = ad.concat([shape_tokens, kp_tokens], axis=1)
        mask = np.concatenate([np.ones((B, L), dtype=bool), np.asarray(kp_mask, dtype=bool)], axis=1)
        y = self.encoder(x, mask)
        return self.out_norm(y[:, L:, :])


class CorrespondenceNet(_TokenTransformer):
    """Keypoint latents for two characters and their bilinear affinity."""

    def __init__(self, cfg: TransformerConfig, token_dim: int, rng, symmetric: bool = False, tau: float = 0.1):
        d = cfg.d_model
        self.kp_enc = MLP(3, cfg.keypoint_hidden, d, rng)
        self.shape_proj = Linear(2 * token_dim, d, rng)
        self.encoder = TransformerEncoder(cfg, rng)
        self.out_norm = LayerNorm(d)
        self.affinity = ad.parameter(np.eye(d) / (tau * d))
        self.symmetric = symmetric

    def embed(self, kp, kp_mask, own_tokens, other_tokens) -> Tensor:
        g_m = self.shape_proj(ad.concat([ad.as_tensor(own_tokens), ad.as_tensor(other_tokens)], axis=-1))
        g_c = self.kp_enc(kp)
        return self._encode(g_c, kp_mask, g_m)

    def bilinear(self) -> Tensor:
        A = self.affinity
        return 0.5 * (A + A.T) if self.symmetric else A

    def logits(self, src: Sequence[CharacterBundle], tgt: Sequence[CharacterBundle]):
        """Returns (logits (B, K1, K2), row mask, column mask)."""
        kp_s, m_s = pad_stack([normalized_keypoints(b) for b in src])
        kp_t, m_t = pad_stack([normalized_keypoints(b) for b in tgt])
        f_s = np.stack([b.tokens.tokens for b in src])
        f_t = np.stack([b.tokens.tokens for b in tgt])
        g_s = self.embed(kp_s, m_s, f_s, f_t)
        g_t = self.embed(kp_t, m_t, f_t, f_s)
        return (g_s @ self.bilinear()) @ g_t.swapaxes(-1, -2), m_s, m_t


class TransferNet(_TokenTransformer):
    """Refines initialized target transforms; decoder output is a residual."""

    def __init__(self, cfg: TransformerConfig, token_dim: int, rng):
        d = cfg.d_model
        self.delta_proj = Linear(token_dim, d, rng)
        self.target_proj = Linear(token_dim, d, rng)
        self.cross = CrossAttentionBlock(d, cfg.n_heads, rng)
        self.shape_proj = Linear(d, d, rng)
        self.kp_enc = MLP(TRANSFER_KP_INPUTS, cfg.keypoint_hidden, d, rng)
        self.encoder = TransformerEncoder(cfg, rng)
        self.out_norm = LayerNorm(d)
        self.decoder = MLP(d, cfg.decoder_hidden, 7, rng, zero_out=True)

    def __call__(self, delta_tokens, target_tokens, kp_features, kp_mask) -> Tensor:
        """(B, K, 7) residuals: 4 quaternion + 3 translation (in target scale units)."""
        q = self.delta_proj(delta_tokens)
        kv = self.target_proj(target_tokens)
        h_m = self.shape_proj(self.cross(q, kv))
        h_c = self.kp_enc(kp_features)
        return self.decoder(self._encode(h_c, kp_mask, h_m))


class PriorNet(_TokenTransformer):
    """Per-keypoint matrix-Fisher parameters from canonical and posed keypoints."""

    def __init__(self, cfg: TransformerConfig, token_dim: int, rng, decoder_hidden: int = 128, s_max: float = S_MAX):
        d = cfg.d_model
        self.kp_enc = MLP(6, cfg.keypoint_hidden, d, rng)
        self.shape_proj = Linear(2 * token_dim, d, rng)
        self.encoder = TransformerEncoder(cfg, rng)
        self.out_norm = LayerNorm(d)
        self.decoder = MLP(d, decoder_hidden, 9, rng, zero_out=True)
        self.s_max = s_max

    def __call__(self, kp_canonical, kp_posed, kp_mask, tokens_canonical, tokens_posed) -> Tensor:
        x = ad.concat([ad.as_tensor(kp_canonical), ad.as_tensor(kp_posed)], axis=-1)
        h_c = self.kp_enc(x)
        h_m = self.shape_proj(ad.concat([ad.as_tensor(tokens_canonical), ad.as_tensor(tokens_posed)], axis=-1))
        raw = self.decoder(self._encode(h_c, kp_mask, h_m))
        return cap_concentration(raw, self.s_max).reshape(*raw.shape[:-1], 3, 3)


def cap_concentration(raw: Tensor, s_max: float) -> Tensor:
    """Smoothly shrink 9-vectors so the Frobenius norm (hence every singular value) stays below s_max."""
    n = ad.sqrt(ad.tsum(raw * raw, axis=-1, keepdims=True) + 1e-12)
    return raw * (ad.tanh(n * (1.0 / s_max)) * s_max / n)


def prior_inputs(bundles: List[CharacterBundle], posed_keypoints: List[np.ndarray]):
    """Batched arrays for :class:`PriorNet` from posed bundles."""
    canon, mask = pad_stack([normalized_keypoints(b) for b in bundles])
    posed, _ = pad_stack([normalized_keypoints(b, p) for b, p in zip(bundles, posed_keypoints)])
    f0 = np.stack([b.tokens.tokens for b in bundles])
    f1 = np.stack([b.posed_tokens.tokens for b in bundles])
    return canon, posed, mask, f0, f1
