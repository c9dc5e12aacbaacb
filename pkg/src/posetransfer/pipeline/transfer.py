"""Transform initialization from a correspondence plan, the transfer pass and inference."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .. import so3
from ..meshcore import Mesh, PoseTransforms, Rig, apply_lbs, estimate_keypoint_transforms, posed_keypoints
from ..nn import autodiff as ad
from ..nn import ops
from ..nn.autodiff import Tensor
from .bundle import CharacterBundle
from .correspondence import CorrespondenceNet, correspondence_forward
from .networks import TransferNet, mesh_frame, pad_tensors

MIN_COLUMN_MASS = 1e-300

log = logging.getLogger(__name__)


def _column_weights(plan: np.ndarray) -> np.ndarray:
    plan = np.asarray(plan, dtype=np.float64)
    if np.any(plan < 0) or not np.all(np.isfinite(plan)):
        raise ValueError("plan entries must be finite and non-negative")
    mass = plan.sum(axis=0)
    if np.any(mass <= MIN_COLUMN_MASS):
        raise ValueError(f"plan columns {np.nonzero(mass <= MIN_COLUMN_MASS)[0].tolist()} have zero mass")
    return plan / mass


def init_target_transforms(src_transforms: PoseTransforms, src_rig: Rig, tgt_rig: Rig, plan):
    """Plan-weighted initial target transforms.

    For target keypoint j with column weights w_ij: the translation and the
    query position are the weighted means of the source translations and
    source canonical keypoints; the rotation is the chordal weighted mean of
    the source rotations. Returns (PoseTransforms, query positions).
    """
    plan = np.asarray(plan, dtype=np.float64)
    K1, K2 = src_rig.n_keypoints, tgt_rig.n_keypoints
    if plan.shape != (K1, K2):
        raise ValueError(f"plan shape {plan.shape} != {(K1, K2)}")
    W = _column_weights(plan)
    t_bar = W.T @ src_transforms.translations
    c_bar = W.T @ src_rig.keypoints
    q = np.empty((K2, 4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", so3.AmbiguousAverageWarning)
        for j in range(K2):
            q[j] = so3.weighted_average_rotation(src_transforms.rotations, W[:, j])
    return PoseTransforms(q, t_bar), c_bar


def init_tensor(plan, quats, translations, src_keypoints):
    """Differentiable counterpart of :func:`init_target_transforms`.

    ``quats`` (K1, 4) and ``translations`` (K1, 3) may be Tensors; the plan
    is a constant. Returns (q_bar, t_bar) Tensors and c_bar array.
    """
    W = _column_weights(plan)
    Q = ad.as_tensor(quats)
    K1 = Q.shape[0]
    outer = ad.reshape(ad.reshape(Q, (K1, 4, 1)) * ad.reshape(Q, (K1, 1, 4)), (K1, 16))
    acc = ad.reshape(ad.Tensor(W.T) @ outer, (W.shape[1], 4, 4))
    q_bar = ops.eigh_top(acc)
    t_bar = ad.Tensor(W.T) @ ad.as_tensor(translations)
    return q_bar, t_bar, W.T @ np.asarray(src_keypoints)


@dataclass
class TransferItem:
    """One source -> target pass with everything the network needs."""

    plan: np.ndarray
    quats: object  # (K1, 4) array or Tensor
    translations: object  # (K1, 3) array or Tensor
    src: CharacterBundle
    tgt: CharacterBundle
    delta_tokens: np.ndarray


def _decode(raw_q, t_bar, delta_t, scale):
    n = ad.norm(raw_q, axis=-1, keepdims=True)
    sign = np.where(raw_q.data[:, :1] < 0, -1.0, 1.0)
    q = raw_q / n * sign
    return q, t_bar + delta_t * scale


def transfer_batch(items: Sequence[TransferItem], net: Optional[TransferNet], init_only: bool = False):
    """Run the transfer network on several passes at once.

    Returns per-item (quaternions, translations) Tensors. With ``init_only``
    (or ``net is None``) the decoder residual is zero and the result is the
    normalized initialization.
    """
    inits = []
    feats = []
    for it in items:
        q_bar, t_bar, c_bar = init_tensor(it.plan, it.quats, it.translations, it.src.rig.keypoints)
        c_s, s_s = mesh_frame(it.src.mesh)
        c_t, s_t = mesh_frame(it.tgt.mesh)
        f = ad.concat(
            [
                ad.Tensor((it.tgt.rig.keypoints - c_t) / s_t),
                ad.Tensor((c_bar - c_s) / s_s),
                (t_bar - c_s) * (1.0 / s_s),
                q_bar,
            ],
            axis=1,
        )
        inits.append((q_bar, t_bar, s_t))
        feats.append(f)
    if init_only or net is None:
        out = []
        for q_bar, t_bar, s_t in inits:
            out.append(_decode(q_bar, t_bar, ad.Tensor(np.zeros(t_bar.shape)), s_t))
        return out
    K = max(f.shape[0] for f in feats)
    kp = pad_tensors(feats, K)
    mask = np.zeros((len(items), K), dtype=bool)
    for b, f in enumerate(feats):
        mask[b, : f.shape[0]] = True
    delta = np.stack([it.delta_tokens for it in items])
    tgt_tokens = np.stack([it.tgt.tokens.tokens for it in items])
    res = net(delta, tgt_tokens, kp, mask)
    out = []
    for b, (q_bar, t_bar, s_t) in enumerate(inits):
        k = feats[b].shape[0]
        r = res[b, :k, :]
        out.append(_decode(q_bar + r[:, 0:4], t_bar, r[:, 4:7], s_t))
    return out


@dataclass
class TransferResult:
    transforms: PoseTransforms
    mesh: Mesh
    plan: np.ndarray
    diagnostics: Dict = field(default_factory=dict)


def transfer_forward(
    src: CharacterBundle,
    tgt: CharacterBundle,
    corr_net: Optional[CorrespondenceNet],
    transfer_net: Optional[TransferNet],
    init_only: bool = False,
    plan: Optional[np.ndarray] = None,
    src_transforms: Optional[PoseTransforms] = None,
) -> TransferResult:
    """Transfer the pose of ``src.posed`` onto ``tgt``'s canonical mesh."""
    if src.posed is None:
        raise ValueError("source bundle has no posed mesh")
    if src_transforms is None:
        src_transforms = estimate_keypoint_transforms(src.mesh, src.posed, src.rig)
    if plan is None:
        if corr_net is None:
            raise ValueError("need a correspondence network or an explicit plan")
        plan = correspondence_forward(src, tgt, corr_net).plan
    delta = src.posed_tokens.tokens - src.tokens.tokens
    item = TransferItem(plan, src_transforms.rotations, src_transforms.translations, src, tgt, delta)
    with ad.no_grad():
        q, t = transfer_batch([item], transfer_net, init_only)[0]
    transforms = PoseTransforms(q.data, t.data)
    init, query = init_target_transforms(src_transforms, src.rig, tgt.rig, plan)
    mesh = apply_lbs(tgt.mesh, tgt.rig, transforms)
    return TransferResult(transforms, mesh, plan, {"init": init, "query_positions": query,
                                                   "source_transforms": src_transforms})


def infer(
    src: CharacterBundle,
    tgt: CharacterBundle,
    corr_net: Optional[CorrespondenceNet],
    transfer_net: Optional[TransferNet],
    refine: bool = False,
    arap_cfg=None,
    init_only: bool = False,
    plan: Optional[np.ndarray] = None,
) -> TransferResult:
    """Transfer, then optionally ARAP-refine with keypoint centroids as soft targets."""
    res = transfer_forward(src, tgt, corr_net, transfer_net, init_only, plan)
    if not refine:
        return res
    from ..evalbench.arap import arap_refine
    from ..evalbench.metrics import els
    from .config import ArapConfig

    arap_cfg = arap_cfg or ArapConfig()
    targets = posed_keypoints(res.mesh, tgt.rig)
    refined = arap_refine(res.mesh, tgt.mesh, tgt.rig, targets, arap_cfg.iters, arap_cfg.keypoint_weight,
                          arap_cfg.anchor_weight)
    # distortion relative to the target's own rest shape; refinement is kept only if it does not add any
    raw_els = els(res.mesh, tgt.mesh)
    ref_els = els(refined.mesh, tgt.mesh)
    kept = ref_els >= raw_els
    if not kept:
        log.info("ARAP result discarded: rest-shape ELS %.6f < %.6f", ref_els, raw_els)
    diag = dict(res.diagnostics, raw_mesh=res.mesh, arap_energy=refined.energies, arap_kept=kept,
                rest_els=(raw_els, ref_els))
    return TransferResult(res.transforms, refined.mesh if kept else res.mesh, res.plan, diag)
