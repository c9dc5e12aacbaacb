"""Finite-difference gradient suite over the primitive ops and the training losses."""
from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from ..meshcore import Mesh
from ..nn import autodiff as ad
from ..nn import ops
from ..nn.gradcheck import GradCheckResult, check_gradients
from ..shapefeat import ShapeFeatConfig, select, tokens_tensor
from .config import PipelineConfig

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _projected(fn: Callable, inputs: Sequence[np.ndarray], rng) -> Tuple[Callable, List[ad.Tensor]]:
    """Scalar loss <fn(inputs), W> for a fixed random W."""
    params = [ad.parameter(np.array(x, dtype=np.float64)) for x in inputs]
    probe = fn(*params)
    W = rng.standard_normal(probe.shape)

    def loss():
        return ad.tsum(fn(*params) * W)

    return loss, params


def _spd(rng, n=4):
    a = rng.standard_normal((n, n))
    return a @ a.T + np.diag([8.0, 3.0, 1.0, 0.2])


def op_cases(rng) -> Dict[str, Tuple[Callable, list]]:
    """name -> (function of Tensors, input arrays) covering every differentiable primitive."""
    x = lambda *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    mask = np.ones((2, 4, 5), dtype=bool)
    mask[1, 3:, :] = False
    mask[1, :, 4:] = False
    tok_mesh = _tetra_blob(rng)
    tok_sel = select(tok_mesh, ShapeFeatConfig(n_tokens=6))
    offsets = x(7, 3, 3)
    weights = rng.dirichlet(np.ones(3), 7)
    return {
        "add": (lambda a, b: a + b, [x(3, 4), x(4)]),
        "sub": (lambda a, b: a - b, [x(3, 4), x(3, 1)]),
        "mul": (lambda a, b: a * b, [x(3, 4), x(1, 4)]),
        "div": (lambda a, b: a / b, [x(3, 4), pos(3, 4)]),
        "power": (lambda a: ad.power(a, 3.0), [x(5)]),
        "exp": (ad.exp, [x(6)]),
        "log": (ad.log, [pos(6)]),
        "sqrt": (ad.sqrt, [pos(6)]),
        "tanh": (ad.tanh, [x(6)]),
        "relu": (ad.relu, [x(8) + np.sign(x(8)) * 0.1]),
        "gelu": (ad.gelu, [x(8)]),
        "where": (lambda a, b: ad.where(np.arange(6) % 2 == 0, a, b), [x(6), x(6)]),
        "sum": (lambda a: ad.tsum(a, axis=1, keepdims=True), [x(3, 4)]),
        "mean": (lambda a: ad.mean(a, axis=0), [x(3, 4)]),
        "reshape_transpose": (lambda a: ad.transpose(ad.reshape(a, (4, 3)), (1, 0)), [x(3, 4)]),
        "getitem": (lambda a: a[np.array([0, 2, 2]), 1:], [x(3, 4)]),
        "concat_stack": (lambda a, b: ad.stack([ad.concat([a, b], axis=0), ad.concat([b, a], axis=0)], axis=1),
                         [x(2, 3), x(2, 3)]),
        "matmul": (ad.matmul, [x(2, 3, 4), x(2, 4, 5)]),
        "logsumexp": (lambda a: ad.logsumexp(a, axis=-1), [x(3, 5)]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [x(3, 5)]),
        "layer_norm": (ad.layer_norm, [x(3, 6), pos(6), x(6)]),
        "cross": (ad.cross, [x(4, 3), x(4, 3)]),
        "norm": (lambda a: ad.norm(a, axis=-1), [x(4, 3)]),
        "sinkhorn": (lambda a: ops.sinkhorn(a, mask[:, :, 0], mask[:, 0, :], iters=30), [x(2, 4, 5)]),
        "eigh_top": (ops.eigh_top, [_spd(rng)]),
        "quat_to_mat": (ops.quat_to_mat, [x(3, 4)]),
        "lbs": (lambda R, t: ops.lbs(R, t, offsets, weights), [x(3, 3, 3), x(3, 3)]),
        "fisher_log_c": (ops.fisher_log_c, [x(2, 3, 3) * 2.0]),
        "shape_tokens": (lambda v: tokens_tensor(v, tok_mesh.faces, tok_sel, 16), [tok_mesh.vertices]),
    }


def _tetra_blob(rng) -> Mesh:
    """A small closed mesh (octahedron with jittered vertices)."""
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    v = v * rng.uniform(0.8, 1.2, (6, 1)) + 0.05 * rng.standard_normal((6, 3))
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return Mesh(v, f)


def op_gradient_checks(seed: int = 0, n_probes: int = 20) -> Dict[str, GradCheckResult]:
    rng = np.random.default_rng([seed, 31])
    out = {}
    for name, (fn, inputs) in op_cases(rng).items():
        loss, params = _projected(fn, inputs, rng)
        out[name] = check_gradients(loss, params, n_probes, seed=seed)
    return out


def loss_gradient_checks(cfg: PipelineConfig = None, seed: int = 0, n_probes: int = 20) -> Dict[str, GradCheckResult]:
    """End-to-end checks of the correspondence, prior and cycle losses on tiny synthetic batches."""
    from .correspondence import build_corr_net, forb_loss, make_pair
    from .prior import build_prior_net, make_sample, nll_loss, predict_concentration, _padded_rotations
    from .stage2 import CyclePair, build_transfer_net, cycle_loss, draw_samples
    from ..evalbench.synth import generate_synthetic_character
    from ..softmatch import sinkhorn_log, text_similarity
    from ..nn.layers import TransformerConfig

    cfg = cfg or PipelineConfig(model=TransformerConfig(d_model=16, n_layers=1, n_heads=2, mlp_hidden=32,
                                                        keypoint_hidden=32, decoder_hidden=32))
    chars = [generate_synthetic_character(seed * 100 + i, cfg.synth, cfg.shape, limits=cfg.limits) for i in range(2)]
    (a, sa), (b, sb) = chars
    out = {}

    corr = build_corr_net(cfg, seed)
    _perturb(corr, seed)
    pairs = [make_pair(a, b, tau=cfg.stage1.tau), make_pair(b, a, tau=cfg.stage1.tau)]
    out["correspondence_loss"] = check_gradients(
        lambda: forb_loss(corr, pairs, cfg.stage1.tau, 20), corr.parameters(), n_probes, seed=seed)

    prior = build_prior_net(cfg, seed)
    _perturb(prior, seed)
    rng = np.random.default_rng([seed, 32])
    samples = [make_sample(sa.posed_bundle(T, cfg.shape), T) for T in (sa.sample(rng), sa.sample(rng))]
    R = _padded_rotations(samples)

    def prior_loss():
        F, mask = predict_concentration(prior, samples, grad=True)
        return nll_loss(F, mask, R)

    out["prior_nll"] = check_gradients(prior_loss, prior.parameters(), n_probes, seed=seed)

    net = build_transfer_net(cfg, seed)
    _perturb(net, seed)

    def plan(s, t):
        return sinkhorn_log(text_similarity(s.rig.names, t.rig.names) / 0.1, 50, 0.0)

    cpairs = [CyclePair(a, sa, b, plan(a, b), plan(b, a)), CyclePair(b, sb, b, plan(b, b), plan(b, b))]
    prior_net = prior if cfg.stage2.use_prior else None
    csamples = draw_samples(cpairs, rng, prior_net, cfg)
    _, _, frozen = cycle_loss(net, csamples, cfg)
    out["cycle_loss"] = check_gradients(
        lambda: cycle_loss(net, csamples, cfg, frozen=frozen)[0], net.parameters(), n_probes, seed=seed)
    return out


def _perturb(net, seed: int, scale: float = 0.05) -> None:
    """Move zero-initialized weights off zero so every parameter carries gradient."""
    rng = np.random.default_rng([seed, 33])
    for p in net.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def gradient_suite(seed: int = 0, n_probes: int = 20, cfg: PipelineConfig = None) -> Dict[str, Dict]:
    """Report dict: per check, max relative error, probe count, tolerance and verdict."""
    report = {}
    for name, res in op_gradient_checks(seed, n_probes).items():
        report[f"op/{name}"] = _entry(res, OP_TOL)
    for name, res in loss_gradient_checks(cfg, seed, n_probes).items():
        report[f"loss/{name}"] = _entry(res, END_TO_END_TOL)
    return report


def _entry(res: GradCheckResult, tol: float) -> Dict:
    return {"max_rel_error": float(res.max_rel_error), "n_probes": res.n_probes, "tolerance": tol,
            "passed": bool(res.passed(tol))}
