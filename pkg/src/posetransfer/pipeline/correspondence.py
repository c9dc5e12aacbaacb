"""Keypoint correspondence: forward pass and text-supervised training."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .. import softmatch
from ..evalbench.synth import generate_synthetic_character
from ..nn import autodiff as ad
from ..nn import ops
from ..nn.optim import AdamW, cosine_lr
from .bundle import CharacterBundle
from .config import PipelineConfig
from .networks import CorrespondenceNet, pad_stack

log = logging.getLogger(__name__)


class Correspondence(NamedTuple):
    logits: np.ndarray  # log S
    affinity: np.ndarray  # S = exp(logits)
    plan: np.ndarray  # Sinkhorn plan M


def build_corr_net(cfg: PipelineConfig, seed: Optional[int] = None) -> CorrespondenceNet:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return CorrespondenceNet(cfg.model, cfg.shape.dim, rng, cfg.stage1.symmetric_affinity, cfg.stage1.tau)


def correspondence_forward(
    src: CharacterBundle,
    tgt: CharacterBundle,
    net: CorrespondenceNet,
    iters: int = 2000,
    tol: float = 1e-9,
) -> Correspondence:
    """Affinities and a converged plan for one pair (training keeps the short fixed unroll)."""
    if src.n_keypoints == 0 or tgt.n_keypoints == 0:
        raise ValueError("both characters need keypoints")
    with ad.no_grad():
        logits, _, _ = net.logits([src], [tgt])
    lg = logits.data[0]
    plan = softmatch.sinkhorn_log(lg, iters, tol)
    return Correspondence(lg, np.exp(lg), plan)


def text_plan(src_names, tgt_names, emb=None, tau: float = 0.02, iters: int = 5000, tol: float = 1e-12) -> np.ndarray:
    """Plan from keypoint labels alone (no network).

    The label-similarity Hungarian matches get a unit bonus before a sharp
    Sinkhorn, so matched pairs carry almost all mass while unmatched rows and
    columns still receive some. The sharp temperature needs many iterations,
    hence the large default budget with early stopping.
    """
    s = softmatch.text_similarity(src_names, tgt_names, emb)
    bonus = softmatch.assignment_matrix(softmatch.hungarian(s), s.shape)
    return softmatch.sinkhorn_log((s + bonus) / tau, iters, tol)


@dataclass
class CorrPair:
    src: CharacterBundle
    tgt: CharacterBundle
    s_cos: np.ndarray
    m_sink: np.ndarray
    m_hung: np.ndarray
    gt_pairs: List[Tuple[int, int]]


def make_pair(src: CharacterBundle, tgt: CharacterBundle, emb=None, tau: float = 0.1, iters: int = 50) -> CorrPair:
    s_cos = softmatch.text_similarity(src.rig.names, tgt.rig.names, emb)
    m_sink, m_hung = softmatch.build_gt_targets(s_cos, tau, iters, tol=0.0)
    return CorrPair(src, tgt, s_cos, m_sink, m_hung, softmatch.hungarian(s_cos))


def synthetic_pairs(cfg: PipelineConfig, n_pairs: int, seed_offset: int, n_characters: int, emb=None,
                    self_fraction: float = 0.1, seed: int = 0) -> List[CorrPair]:
    """Random character pairs drawn from a pool of generated characters."""
    chars = [generate_synthetic_character(seed_offset + i, cfg.synth, cfg.shape)[0] for i in range(n_characters)]
    rng = np.random.default_rng([seed, seed_offset])
    pairs = []
    for _ in range(n_pairs):
        a = int(rng.integers(n_characters))
        b = a if rng.random() < self_fraction else int(rng.integers(n_characters))
        pairs.append(make_pair(chars[a], chars[b], emb, cfg.stage1.tau, cfg.stage1.sinkhorn_iters))
    return pairs


def _batch_targets(pairs: Sequence[CorrPair]):
    K1 = max(p.s_cos.shape[0] for p in pairs)
    K2 = max(p.s_cos.shape[1] for p in pairs)

    def pad(m):
        out = np.zeros((K1, K2))
        out[: m.shape[0], : m.shape[1]] = m
        return out

    return (np.stack([pad(p.s_cos) for p in pairs]), np.stack([pad(p.m_sink) for p in pairs]),
            np.stack([pad(p.m_hung) for p in pairs]))


def forb_loss(net: CorrespondenceNet, pairs: Sequence[CorrPair], tau: float = 0.1, iters: int = 50):
    """Mean over pairs of ||log S - S_cos/tau||^2 + ||M - M_sink||^2 + ||M - M_hung||^2."""
    logits, m_s, m_t = net.logits([p.src for p in pairs], [p.tgt for p in pairs])
    s_cos, m_sink, m_hung = _batch_targets(pairs)
    mask = m_s[:, :, None] & m_t[:, None, :]
    plan = ops.sinkhorn(logits, m_s, m_t, iters=iters)
    d_s = ad.where(mask, logits - s_cos / tau, 0.0)
    loss = ad.tsum(d_s * d_s) + ad.tsum((plan - m_sink) ** 2) + ad.tsum((plan - m_hung) ** 2)
    return loss * (1.0 / len(pairs))


def predicted_pairs(net: CorrespondenceNet, pairs: Sequence[CorrPair], batch: int = 64) -> List[list]:
    """Hungarian rounding of the predicted affinities (equivalently of the plans)."""
    out = []
    with ad.no_grad():
        for i in range(0, len(pairs), batch):
            chunk = pairs[i : i + batch]
            logits, _, _ = net.logits([p.src for p in chunk], [p.tgt for p in chunk])
            for b, p in enumerate(chunk):
                K1, K2 = p.s_cos.shape
                out.append(softmatch.hungarian(logits.data[b, :K1, :K2]))
    return out


def match_accuracy(net: CorrespondenceNet, pairs: Sequence[CorrPair]) -> float:
    """Fraction of text-GT pairs reproduced by the rounded prediction."""
    hit = total = 0
    for pred, p in zip(predicted_pairs(net, pairs), pairs):
        gt = set(p.gt_pairs)
        hit += len(gt & set(pred))
        total += len(gt)
    return hit / max(total, 1)


@dataclass
class TrainLog:
    train_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    skipped_steps: int = 0
    seconds: float = 0.0


def stage1_train(
    train_pairs: Sequence[CorrPair],
    cfg: PipelineConfig,
    val_pairs: Sequence[CorrPair] = (),
    net: Optional[CorrespondenceNet] = None,
    epochs: Optional[int] = None,
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    eval_every: int = 5,
) -> Tuple[CorrespondenceNet, TrainLog]:
    """Minimize the correspondence loss with AdamW over shuffled mini-batches.

    ``steps`` overrides ``epochs`` when given (used for overfit smoke tests).
    """
    if not train_pairs:
        raise ValueError("empty training set")
    c1 = cfg.stage1
    seed = cfg.seed if seed is None else seed
    net = net or build_corr_net(cfg, seed)
    opt = AdamW(net.parameters(), lr=c1.lr, weight_decay=c1.weight_decay, clip_norm=c1.grad_clip or None)
    rng = np.random.default_rng([seed, 1])
    tlog = TrainLog()
    t0 = time.perf_counter()
    n = len(train_pairs)
    bs = min(c1.batch, n)
    total_steps = steps if steps is not None else (epochs or c1.epochs) * int(np.ceil(n / bs))
    per_epoch = int(np.ceil(n / bs))
    order = rng.permutation(n)
    for step in range(total_steps):
        k = step % per_epoch
        if k == 0 and step:
            order = rng.permutation(n)
        idx = order[k * bs : (k + 1) * bs]
        if c1.cosine_decay:
            opt.lr = cosine_lr(c1.lr, step, total_steps)
        opt.zero_grad()
        loss = forb_loss(net, [train_pairs[i] for i in idx], c1.tau, c1.sinkhorn_iters)
        loss.backward()
        if not opt.step():
            tlog.skipped_steps += 1
        tlog.train_loss.append(loss.item())
        tlog.grad_norm.append(opt.last_grad_norm)
        epoch_end = k == per_epoch - 1 or step == total_steps - 1
        if val_pairs and epoch_end and ((step + 1) // per_epoch) % eval_every == 0:
            acc = match_accuracy(net, val_pairs)
            tlog.val_accuracy.append(acc)
            log.info("stage1 step %d loss %.4f val acc %.4f", step + 1, loss.item(), acc)
    tlog.seconds = time.perf_counter() - t0
    return net, tlog
