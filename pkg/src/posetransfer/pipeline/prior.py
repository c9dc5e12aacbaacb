"""Matrix-Fisher pose prior: dataset, loss and training."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .. import fisher
from ..evalbench.synth import generate_synthetic_character
from ..meshcore import posed_keypoints
from ..nn import autodiff as ad
from ..nn import ops
from ..nn.optim import AdamW
from .bundle import CharacterBundle
from .config import PipelineConfig
from .networks import PriorNet, normalized_keypoints, pad_stack, prior_inputs

log = logging.getLogger(__name__)


@dataclass
class PriorSample:
    bundle: CharacterBundle  # posed
    posed_kp: np.ndarray  # (K, 3) skin-weighted centroids of the posed mesh
    rotations: np.ndarray  # (K, 3, 3) ground truth
    translations: np.ndarray  # (K, 3)


def build_prior_net(cfg: PipelineConfig, seed: Optional[int] = None) -> PriorNet:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 3])
    return PriorNet(cfg.model, cfg.shape.dim, rng, cfg.prior.decoder_hidden)


def make_sample(bundle: CharacterBundle, transforms) -> PriorSample:
    return PriorSample(bundle, posed_keypoints(bundle.posed, bundle.rig), transforms.matrices,
                       np.asarray(transforms.translations))


def prior_dataset(cfg: PipelineConfig, n_characters: int, poses_per_character: int, seed_offset: int,
                  seed: int = 0) -> List[PriorSample]:
    out = []
    for i in range(n_characters):
        b, smp = generate_synthetic_character(seed_offset + i, cfg.synth, cfg.shape, limits=cfg.limits)
        rng = np.random.default_rng([seed, seed_offset + i, 11])
        for _ in range(poses_per_character):
            T = smp.sample(rng)
            out.append(make_sample(smp.posed_bundle(T, cfg.shape), T))
    return out


def predict_concentration(net: PriorNet, samples: Sequence[PriorSample], grad: bool = False):
    """F for each sample: a (B, K, 3, 3) Tensor plus the keypoint mask."""
    inputs = prior_inputs([s.bundle for s in samples], [s.posed_kp for s in samples])
    if grad:
        return net(*inputs), inputs[2]
    with ad.no_grad():
        return net(*inputs), inputs[2]


def _padded_rotations(samples):
    R, _ = pad_stack([s.rotations for s in samples])
    return R


def nll_loss(F, mask, R):
    """Mean over valid keypoints of log c(F) - tr(F^T R)."""
    logc = ops.fisher_log_c(F)
    tr = ad.tsum(ad.tsum(F * R, axis=-1), axis=-1)
    per = ad.where(mask, logc - tr, 0.0)
    return ad.tsum(per) * (1.0 / mask.sum())


def sample_loss(F, mask, samples: Sequence[PriorSample], n: int, seed: int):
    """Score-function surrogate for E[vertex error of LBS with sampled rotations].

    Samples are drawn with gradients stopped; the gradient of the expected
    reconstruction error reaches F through log p(R | F). A per-item mean
    baseline reduces variance. Returns (surrogate Tensor, mean error).
    """
    Fd = F.data
    terms = []
    errs = []
    logc = ops.fisher_log_c(F)
    for b, s in enumerate(samples):
        K = s.rotations.shape[0]
        draws = np.stack([fisher.sample(Fd[b, k], n, seed=seed * 1_000_003 + b * 1009 + k) for k in range(K)], axis=1)
        rig = s.bundle.rig
        offsets = s.bundle.mesh.vertices[:, None, :] - rig.keypoints[None]
        W = rig.skin_weights
        target = s.bundle.posed.vertices
        e = np.empty(n)
        for d in range(n):
            V = np.einsum("nk,kij,nkj->ni", W, draws[d], offsets) + W @ s.translations
            e[d] = np.mean(np.sum((V - target) ** 2, axis=1))
        errs.append(e.mean())
        adv = e - e.mean()
        # log p(R_d | F) summed over keypoints, for each draw d
        tr = ad.tsum(ad.tsum(ad.reshape(F[b, :K], (1, K, 3, 3)) * draws, axis=-1), axis=-1)  # (n, K)
        logp = ad.tsum(tr, axis=1) - ad.tsum(logc[b, :K])
        terms.append(ad.tsum(logp * adv) * (1.0 / n))
    return ad.sum_all(terms) * (1.0 / len(samples)), float(np.mean(errs))


@dataclass
class PriorLog:
    nll: List[float] = field(default_factory=list)
    sample_err: List[float] = field(default_factory=list)
    skipped_steps: int = 0
    seconds: float = 0.0


def prior_train(samples: Sequence[PriorSample], cfg: PipelineConfig, net: Optional[PriorNet] = None,
                epochs: Optional[int] = None, seed: Optional[int] = None) -> Tuple[PriorNet, PriorLog]:
    if not samples:
        raise ValueError("empty training set")
    pc = cfg.prior
    seed = cfg.seed if seed is None else seed
    net = net or build_prior_net(cfg, seed)
    opt = AdamW(net.parameters(), lr=pc.lr, weight_decay=pc.weight_decay)
    rng = np.random.default_rng([seed, 5])
    plog = PriorLog()
    t0 = time.perf_counter()
    n = len(samples)
    bs = min(pc.batch, n)
    step = 0
    for ep in range(epochs if epochs is not None else pc.epochs):
        order = rng.permutation(n)
        for i in range(0, n, bs):
            batch = [samples[j] for j in order[i : i + bs]]
            F, mask = predict_concentration(net, batch, grad=True)
            loss = nll_loss(F, mask, _padded_rotations(batch))
            nll_val = loss.item()
            if pc.lambda_sample > 0:
                surr, err = sample_loss(F, mask, batch, pc.n_samples, seed * 7919 + step)
                loss = loss + pc.lambda_sample * surr
                plog.sample_err.append(err)
            opt.zero_grad()
            loss.backward()
            if not opt.step():
                plog.skipped_steps += 1
            plog.nll.append(nll_val)
            step += 1
        log.info("prior epoch %d nll %.4f", ep + 1, np.mean(plog.nll[-int(np.ceil(n / bs)):]))
    plog.seconds = time.perf_counter() - t0
    return net, plog


def prior_for_pose(net: PriorNet, bundle: CharacterBundle) -> np.ndarray:
    """(K, 3, 3) concentration matrices for a posed bundle."""
    s = PriorSample(bundle, posed_keypoints(bundle.posed, bundle.rig), np.zeros((bundle.n_keypoints, 3, 3)),
                    np.zeros((bundle.n_keypoints, 3)))
    F, _ = predict_concentration(net, [s])
    return F.data[0, : bundle.n_keypoints]


def mode_errors(net: PriorNet, samples: Sequence[PriorSample]) -> np.ndarray:
    """Geodesic angle (degrees) between mode(F_k) and the true rotation, all keypoints."""
    from .. import so3

    out = []
    for s in samples:
        F = prior_for_pose(net, s.bundle)
        out.append(np.degrees(so3.geodesic_angle(fisher.mode(F), s.rotations)))
    return np.concatenate(out)
