import dataclasses

import numpy as np
import pytest

from posetransfer.evalbench.benchmark import identity_plan
from posetransfer.meshcore import estimate_keypoint_transforms
from posetransfer.nn.layers import TransformerConfig
from posetransfer.pipeline.config import PipelineConfig
from posetransfer.pipeline.correspondence import (build_corr_net, correspondence_forward, make_pair, match_accuracy,
                                                  stage1_train, text_plan)
from posetransfer.pipeline.diagnostics import gradient_suite
from posetransfer.pipeline.prior import make_sample, prior_for_pose, prior_train
from posetransfer.pipeline.stage2 import (CyclePair, build_transfer_net, cycle_loss, draw_samples, make_cycle_pair,
                                          stage2_train)
from posetransfer.pipeline.transfer import (TransferItem, infer, init_target_transforms, transfer_batch,
                                            transfer_forward)

TINY = PipelineConfig(model=TransformerConfig(d_model=16, n_layers=1, n_heads=2, mlp_hidden=32, keypoint_hidden=32,
                                              decoder_hidden=32))


def _posed(bundle, sampler, seed=0):
    T = sampler.sample(np.random.default_rng(seed))
    return sampler.posed_bundle(T), T


def test_config_round_trip(tmp_path):
    cfg = dataclasses.replace(TINY, seed=7)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    assert PipelineConfig.load(path) == cfg
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"stage1": {"bogus": 1}})
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"nonsense": {}})


def test_text_plan_self_is_identity(characters):
    names = characters[0][0].rig.names
    P = text_plan(names, names)
    K = len(names)
    np.testing.assert_allclose(P, np.eye(K) / K, atol=1e-12)


def test_text_plan_marginals(characters):
    a, b = characters[0][0].rig.names, characters[2][0].rig.names
    P = text_plan(a, b)
    np.testing.assert_allclose(P.sum(axis=1), 1.0 / len(a), atol=1e-6)
    np.testing.assert_allclose(P.sum(axis=0), 1.0 / len(b), atol=1e-6)


def test_init_only_self_transfer_identity(characters):
    b, sampler = characters[1]
    posed, _ = _posed(b, sampler)
    res = infer(posed, b, None, None, init_only=True, plan=identity_plan(b.n_keypoints))
    assert np.max(np.abs(res.mesh.vertices - posed.posed.vertices)) < 1e-6


def test_zero_init_decoder_matches_init_only(characters):
    b, sampler = characters[0]
    tgt = characters[2][0]
    posed, _ = _posed(b, sampler, 3)
    plan = text_plan(b.rig.names, tgt.rig.names)
    net = build_transfer_net(TINY, 0)
    a = transfer_forward(posed, tgt, None, net, plan=plan)
    z = transfer_forward(posed, tgt, None, None, init_only=True, plan=plan)
    np.testing.assert_array_equal(a.mesh.vertices, z.mesh.vertices)


def test_init_transforms_match_tensor_path(characters):
    b, sampler = characters[0]
    tgt = characters[1][0]
    posed, _ = _posed(b, sampler, 4)
    T = estimate_keypoint_transforms(b.mesh, posed.posed, b.rig)
    plan = text_plan(b.rig.names, tgt.rig.names)
    init, _ = init_target_transforms(T, b.rig, tgt.rig, plan)
    item = TransferItem(plan, T.rotations, T.translations, posed, tgt, np.zeros_like(b.tokens.tokens))
    q, t = transfer_batch([item], None)[0]
    np.testing.assert_allclose(np.abs(np.sum(q.data * init.rotations, axis=1)), 1.0, atol=1e-9)
    np.testing.assert_allclose(t.data, init.translations, atol=1e-12)


def test_plan_validation(characters):
    b, sampler = characters[0]
    posed, _ = _posed(b, sampler)
    K = b.n_keypoints
    bad = identity_plan(K)
    bad[:, 0] = 0.0
    with pytest.raises(ValueError):
        infer(posed, b, None, None, init_only=True, plan=bad)
    with pytest.raises(ValueError):
        infer(posed, b, None, None, init_only=True, plan=np.ones((K, K + 1)))
    with pytest.raises(ValueError):
        infer(posed, b, None, None, init_only=True)
    with pytest.raises(ValueError):
        infer(b, b, None, None, init_only=True, plan=identity_plan(K))


def test_infer_refine_reports_safeguard(characters):
    b, sampler = characters[0]
    tgt = characters[1][0]
    posed, _ = _posed(b, sampler, 2)
    res = infer(posed, tgt, None, None, refine=True, init_only=True, plan=text_plan(b.rig.names, tgt.rig.names))
    raw_els, ref_els = res.diagnostics["rest_els"]
    assert res.diagnostics["arap_kept"] == (ref_els >= raw_els)
    energies = res.diagnostics["arap_energy"]
    assert energies[-1] <= energies[0]


def test_stage1_overfits_small_batch(characters):
    a, b = characters[0][0], characters[2][0]
    pairs = [make_pair(a, b), make_pair(b, a), make_pair(a, a)]
    cfg = dataclasses.replace(TINY, stage1=dataclasses.replace(TINY.stage1, lr=3e-3, cosine_decay=False))
    net0 = build_corr_net(cfg, 0)
    net, log = stage1_train(pairs, cfg, steps=None, epochs=80)
    assert log.train_loss[-1] < 0.2 * log.train_loss[0]
    assert match_accuracy(net, pairs) >= match_accuracy(net0, pairs)
    corr = correspondence_forward(a, b, net)
    np.testing.assert_allclose(corr.plan.sum(axis=1), 1.0 / a.n_keypoints, atol=1e-5)


def test_stage1_rejects_empty():
    with pytest.raises(ValueError):
        stage1_train([], TINY)


def test_prior_training_reduces_nll(characters):
    cfg = dataclasses.replace(TINY, prior=dataclasses.replace(TINY.prior, lr=3e-3, lambda_sample=0.0))
    samples = []
    for b, sampler in characters:
        for s in range(2):
            posed, T = _posed(b, sampler, s)
            samples.append(make_sample(posed, T))
    net, log = prior_train(samples, cfg, epochs=15)
    assert np.mean(log.nll[-3:]) < log.nll[0]
    F = prior_for_pose(net, samples[0].bundle)
    assert F.shape == (samples[0].bundle.n_keypoints, 3, 3)
    assert np.all(np.isfinite(F))


def test_stage2_requires_correspondence(characters):
    b, sampler = characters[0]
    with pytest.raises(ValueError):
        make_cycle_pair(b, sampler, b, None)
    with pytest.raises(ValueError):
        stage2_train([], build_corr_net(TINY), None, TINY)


def test_stage2_smoke(characters):
    (a, sa), (b, _) = characters[0], characters[1]
    def soft(x, y):  # soft plans leave a cycle error for training to remove
        return text_plan(x.rig.names, y.rig.names, tau=0.5)

    pairs = [CyclePair(a, sa, b, soft(a, b), soft(b, a)), CyclePair(a, sa, a, soft(a, a), soft(a, a))]
    cfg = dataclasses.replace(TINY, stage2=dataclasses.replace(TINY.stage2, use_prior=False, batch=2, lr=1e-3))
    net, log = stage2_train(pairs, build_corr_net(cfg), None, cfg, steps=40)
    assert np.isfinite(log.rec_final)
    assert log.rec_final < log.rec_initial
    samples = draw_samples(pairs, np.random.default_rng(0), None, cfg)
    loss, terms, _ = cycle_loss(net, samples, cfg)
    assert np.isfinite(loss.item()) and set(terms) == {"rec", "reg", "feat"}


def test_identity_self_cycle_has_zero_reconstruction(characters):
    a, sa = characters[2]
    P = identity_plan(a.n_keypoints)
    cfg = dataclasses.replace(TINY, stage2=dataclasses.replace(TINY.stage2, use_prior=False))
    samples = draw_samples([CyclePair(a, sa, a, P, P)], np.random.default_rng(1), None, cfg)
    _, terms, _ = cycle_loss(build_transfer_net(cfg), samples, cfg)
    assert terms["rec"] < 1e-16


def test_gradient_suite_passes():
    report = gradient_suite(seed=0, n_probes=20)
    assert all(v["passed"] for v in report.values()), {k: v for k, v in report.items() if not v["passed"]}
    assert all(v["n_probes"] >= 20 for v in report.values())
