"""Cycle-consistency training of the transfer network.

A source pose is transferred to the target character and back; the
reconstruction is compared with the posed source (vertex error), scored
under the pose prior, and compared in shape-token space. The return pass
starts from the predicted target transforms directly; the shape residual it
is conditioned on is computed from the intermediate mesh without gradient.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import so3
from ..evalbench.synth import PoseSampler, generate_synthetic_character
from ..meshcore import Mesh, PoseTransforms, _lbs
from ..nn import autodiff as ad
from ..nn import ops
from ..nn.optim import AdamW, cosine_lr
from ..shapefeat import encode_shape, select, tokens_tensor
from .bundle import CharacterBundle
from .config import PipelineConfig
from .correspondence import CorrespondenceNet, correspondence_forward
from .networks import TransferNet
from .prior import prior_for_pose
from .transfer import TransferItem, transfer_batch

log = logging.getLogger(__name__)


@dataclass(eq=False)
class CyclePair:
    src: CharacterBundle
    sampler: PoseSampler
    tgt: CharacterBundle
    plan_st: np.ndarray
    plan_ts: np.ndarray

    def __post_init__(self):
        rig = self.src.rig
        self.offsets = self.src.mesh.vertices[:, None, :] - rig.keypoints[None]


@dataclass(eq=False)
class CycleSample:
    pair: CyclePair
    pose: PoseTransforms
    posed: CharacterBundle
    prior_F: Optional[np.ndarray] = None
    prior_logc: Optional[np.ndarray] = None


def build_transfer_net(cfg: PipelineConfig, seed: Optional[int] = None) -> TransferNet:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 2])
    return TransferNet(cfg.model, cfg.shape.dim, rng)


def make_cycle_pair(src, sampler, tgt, corr_net: CorrespondenceNet) -> CyclePair:
    if corr_net is None:
        raise ValueError("cycle training needs a trained (frozen) correspondence network")
    return CyclePair(src, sampler, tgt, correspondence_forward(src, tgt, corr_net).plan,
                     correspondence_forward(tgt, src, corr_net).plan)


def cycle_pairs(cfg: PipelineConfig, corr_net: CorrespondenceNet, n_pairs: int, n_characters: int,
                seed_offset: int, self_fraction: float = 0.2, seed: int = 0) -> List[CyclePair]:
    chars = [generate_synthetic_character(seed_offset + i, cfg.synth, cfg.shape, limits=cfg.limits)
             for i in range(n_characters)]
    rng = np.random.default_rng([seed, seed_offset, 21])
    cache: Dict[Tuple[int, int], CyclePair] = {}
    out = []
    for _ in range(n_pairs):
        a = int(rng.integers(n_characters))
        b = a if rng.random() < self_fraction else int(rng.integers(n_characters))
        if (a, b) not in cache:
            cache[(a, b)] = make_cycle_pair(chars[a][0], chars[a][1], chars[b][0], corr_net)
        out.append(cache[(a, b)])
    return out


def draw_samples(pairs: Sequence[CyclePair], rng: np.random.Generator, prior_net=None, cfg: PipelineConfig = None):
    cfg = cfg or PipelineConfig()
    out = []
    for p in pairs:
        T = p.sampler.sample(rng)
        posed = p.sampler.posed_bundle(T, cfg.shape)
        s = CycleSample(p, T, posed)
        if prior_net is not None:
            from ..fisher import log_normalizer

            s.prior_F = prior_for_pose(prior_net, posed)
            s.prior_logc = np.asarray(log_normalizer(s.prior_F)).reshape(-1)
        out.append(s)
    return out


@dataclass
class FrozenCycleState:
    """Non-differentiable choices of one cycle evaluation (for reuse in gradient checks)."""

    delta_return: List[np.ndarray]
    selections: List[object]


def cycle_loss(net: TransferNet, samples: Sequence[CycleSample], cfg: PipelineConfig,
               frozen: Optional[FrozenCycleState] = None, lambdas: Optional[Tuple[float, float, float]] = None):
    """Mean over samples of lam_rec L_rec + lam_reg L_reg + lam_feat L_feat.

    Returns (total Tensor, per-term means, frozen state).
    """
    c2 = cfg.stage2
    lam_rec, lam_reg, lam_feat = lambdas if lambdas is not None else (c2.lambda_rec, c2.lambda_reg, c2.lambda_feat)
    items1 = [
        TransferItem(s.pair.plan_st, s.pose.rotations, s.pose.translations, s.pair.src, s.pair.tgt,
                     s.posed.posed_tokens.tokens - s.posed.tokens.tokens)
        for s in samples
    ]
    out1 = transfer_batch(items1, net)
    deltas = [] if frozen is None else frozen.delta_return
    items2 = []
    for b, (s, (q1, t1)) in enumerate(zip(samples, out1)):
        if frozen is None:
            tgt = s.pair.tgt
            Vt = _lbs(tgt.mesh.vertices, tgt.rig.keypoints, tgt.rig.skin_weights, so3.attitude(q1.data), t1.data)
            tok = encode_shape(Mesh(Vt, tgt.mesh.faces), cfg.shape).tokens
            deltas.append(tok - tgt.tokens.tokens)
        items2.append(TransferItem(s.pair.plan_ts, q1, t1, s.pair.tgt, s.pair.src, deltas[b]))
    out2 = transfer_batch(items2, net)
    sels = [] if frozen is None else frozen.selections
    terms = {"rec": [], "reg": [], "feat": []}
    totals = []
    for b, (s, (q2, t2)) in enumerate(zip(samples, out2)):
        src = s.pair.src
        R2 = ops.quat_to_mat(q2)
        V = ops.lbs(R2, t2, s.pair.offsets, src.rig.skin_weights)
        d = V - s.posed.posed.vertices
        l_rec = ad.tsum(d * d)
        total = l_rec * lam_rec
        terms["rec"].append(l_rec.item())
        if s.prior_F is not None and lam_reg:
            l_reg = ad.tsum(ad.Tensor(s.prior_logc)) - ad.tsum(ad.Tensor(s.prior_F) * R2)
            total = total + l_reg * lam_reg
            terms["reg"].append(l_reg.item())
        if lam_feat:
            if frozen is None:
                sels.append(select(Mesh(V.data, src.mesh.faces), cfg.shape))
            tok = tokens_tensor(V, src.mesh.faces, sels[b], cfg.shape.dim)
            e = tok - s.posed.posed_tokens.tokens
            l_feat = ad.tsum(e * e)
            total = total + l_feat * lam_feat
            terms["feat"].append(l_feat.item())
        totals.append(total)
    loss = ad.sum_all(totals) * (1.0 / len(samples))
    means = {k: float(np.mean(v)) if v else 0.0 for k, v in terms.items()}
    return loss, means, FrozenCycleState(deltas, sels)


def mean_reconstruction(net: TransferNet, samples: Sequence[CycleSample], cfg: PipelineConfig, batch: int = 32) -> float:
    vals = []
    with ad.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            _, terms, _ = cycle_loss(net, chunk, cfg, lambdas=(1.0, 0.0, 0.0))
            vals.append(terms["rec"] * len(chunk))
    return float(np.sum(vals) / len(samples))


@dataclass
class Stage2Log:
    loss: List[float] = field(default_factory=list)
    rec: List[float] = field(default_factory=list)
    rec_initial: float = float("nan")
    rec_final: float = float("nan")
    skipped_steps: int = 0
    seconds: float = 0.0


def stage2_train(pairs: Sequence[CyclePair], corr_net: CorrespondenceNet, prior_net, cfg: PipelineConfig,
                 net: Optional[TransferNet] = None, epochs: Optional[int] = None, steps: Optional[int] = None,
                 seed: Optional[int] = None) -> Tuple[TransferNet, Stage2Log]:
    """Train the transfer network on cycles; the correspondence network stays frozen.

    ``rec_initial``/``rec_final`` are the mean reconstruction errors on the
    first epoch's poses before and after training.
    """
    if corr_net is None:
        raise ValueError("cycle training needs a trained (frozen) correspondence network")
    if not pairs:
        raise ValueError("empty training set")
    c2 = cfg.stage2
    seed = cfg.seed if seed is None else seed
    net = net or build_transfer_net(cfg, seed)
    prior = prior_net if c2.use_prior else None
    opt = AdamW(net.parameters(), lr=c2.lr, weight_decay=c2.weight_decay)
    rng = np.random.default_rng([seed, 9])
    slog = Stage2Log()
    t0 = time.perf_counter()
    eval_samples = draw_samples(pairs, np.random.default_rng([seed, 10]), prior, cfg)
    slog.rec_initial = mean_reconstruction(net, eval_samples, cfg)
    n = len(pairs)
    bs = min(c2.batch, n)
    per_epoch = int(np.ceil(n / bs))
    total_steps = steps if steps is not None else (epochs if epochs is not None else c2.epochs) * per_epoch
    samples = eval_samples
    for step in range(total_steps):
        k = step % per_epoch
        if k == 0:
            if step and c2.resample_poses:
                samples = draw_samples(pairs, rng, prior, cfg)
            order = rng.permutation(n)
        batch = [samples[i] for i in order[k * bs : (k + 1) * bs]]
        loss, terms, _ = cycle_loss(net, batch, cfg)
        if c2.cosine_decay:
            opt.lr = cosine_lr(c2.lr, step, total_steps)
        opt.zero_grad()
        loss.backward()
        if not opt.step():
            slog.skipped_steps += 1
        slog.loss.append(loss.item())
        slog.rec.append(terms["rec"])
        if k == per_epoch - 1:
            log.info("stage2 step %d loss %.5f rec %.5f", step + 1, np.mean(slog.loss[-per_epoch:]),
                     np.mean(slog.rec[-per_epoch:]))
    slog.rec_final = mean_reconstruction(net, eval_samples, cfg)
    slog.seconds = time.perf_counter() - t0
    return net, slog
