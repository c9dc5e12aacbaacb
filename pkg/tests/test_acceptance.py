"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The training criteria (7, 8 and the toy-suite part of 9) share module-scoped
runs, so the whole file takes on the order of an hour on one CPU core.
"""
import itertools
import json
import time

import numpy as np
import pytest

from posetransfer import cli, fisher, so3, softmatch
from posetransfer.evalbench.arap import arap_refine
from posetransfer.evalbench.benchmark import identity_plan, run_cycle_benchmark, toy_suite
from posetransfer.evalbench.metrics import els, pmd
from posetransfer.evalbench.synth import generate_synthetic_character
from posetransfer.meshcore import posed_keypoints
from posetransfer.pipeline.config import PipelineConfig
from posetransfer.pipeline.correspondence import match_accuracy, stage1_train, synthetic_pairs
from posetransfer.pipeline.diagnostics import END_TO_END_TOL, OP_TOL, gradient_suite
from posetransfer.pipeline.prior import prior_dataset, prior_train
from posetransfer.pipeline.stage2 import build_transfer_net, cycle_pairs, stage2_train
from posetransfer.pipeline.transfer import infer

CFG = PipelineConfig()


def _verdict(acceptance, n, ok, detail):
    acceptance[n] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1


def _brute_force(s):
    K1, K2 = s.shape
    if K1 <= K2:
        perms = np.array(list(itertools.permutations(range(K2), K1)), dtype=int).reshape(-1, K1)
        return s[np.arange(K1), perms].sum(axis=1).max()
    perms = np.array(list(itertools.permutations(range(K1), K2)), dtype=int).reshape(-1, K2)
    return s[perms, np.arange(K2)].sum(axis=1).max()


def test_c1_hungarian_oracle(acceptance):
    rng = np.random.default_rng(1)
    worst, elapsed = 0.0, 0.0
    for _ in range(200):
        K1, K2 = rng.integers(1, 9, 2)
        if min(K1, K2) > 7:
            K1 = 7
        s = rng.standard_normal((K1, K2))
        t0 = time.perf_counter()
        pairs = softmatch.hungarian(s)
        elapsed += time.perf_counter() - t0
        assert len(pairs) == min(K1, K2)
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
        worst = max(worst, abs(sum(s[i, j] for i, j in pairs) - _brute_force(s)))
    _verdict(acceptance, 1, worst < 1e-12 and elapsed < 10.0,
             f"max score gap {worst:.2e} over 200 matrices, solver time {elapsed:.2f}s")


# ---------------------------------------------------------------- 2


def test_c2_sinkhorn(acceptance):
    rng = np.random.default_rng(2)
    marg, inv = 0.0, 0.0
    for _ in range(100):
        K1, K2 = rng.integers(1, 65), rng.integers(1, 97)
        S = rng.uniform(0.01, 1.0, (K1, K2))
        M = softmatch.sinkhorn(S, iters=200, tol=0.0)
        marg = max(marg, np.max(np.abs(M.sum(axis=1) - 1.0 / K1)), np.max(np.abs(M.sum(axis=0) - 1.0 / K2)))
        c = 10.0 ** rng.uniform(-3, 3)
        inv = max(inv, np.max(np.abs(softmatch.sinkhorn(c * S, iters=200, tol=0.0) - M)))
    _verdict(acceptance, 2, marg < 1e-5 and inv < 1e-8,
             f"max marginal error {marg:.2e} (200 iterations), scale-invariance gap {inv:.2e}")


# ---------------------------------------------------------------- 3


def test_c3_rotation_averaging(acceptance):
    rng = np.random.default_rng(3)
    sign_gap = 0.0
    opt_ok = True
    for _ in range(100):
        n = int(rng.integers(1, 8))
        q = so3.random_quaternions(n, rng)
        w = rng.uniform(0.0, 1.0, n) + 1e-3
        avg = so3.weighted_average_rotation(q, w)
        flipped = q * rng.choice([-1.0, 1.0], (n, 1))
        sign_gap = max(sign_gap, np.max(np.abs(so3.attitude(so3.weighted_average_rotation(flipped, w))
                                               - so3.attitude(avg))))
        best = so3.chordal_objective(avg, q, w)
        cand = so3.random_quaternions(1000, rng)
        others = min(so3.chordal_objective(c, q, w) for c in cand)
        opt_ok &= best <= others
    z90 = so3.axis_angle_to_quat(np.array([0.0, 0.0, 1.0]), np.pi / 2)
    mid = so3.weighted_average_rotation(np.stack([so3.IDENTITY_QUAT, z90]), [0.5, 0.5])
    angle = np.degrees(2.0 * np.arctan2(np.linalg.norm(mid[1:]), mid[0]))
    axis_ok = np.allclose(mid[1:3], 0.0, atol=1e-12)
    ok = sign_gap == 0.0 and abs(angle - 45.0) < 1e-9 and axis_ok and opt_ok
    _verdict(acceptance, 3, ok, f"sign gap {sign_gap:.1e}, midpoint {angle:.12f} deg, "
             f"optimal against 1000 random quaternions in all 100 sets: {opt_ok}")


# ---------------------------------------------------------------- 4


def test_c4_matrix_fisher(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    R = so3.random_rotations(1_000_000, rng)
    worst = 0.0
    for _ in range(50):
        U = so3.random_rotations(2, rng)
        F = U[0] @ np.diag(rng.uniform(0.0, 10.0, 3)) @ U[1].T
        mc = fisher.haar_log_normalizer_mc(F, R)
        worst = max(worst, abs(fisher.log_normalizer(F) - mc) / abs(mc))
    zero = fisher.log_normalizer(np.zeros((3, 3)))
    draws = fisher.sample(20.0 * np.eye(3), 20_000, seed=4)
    mean_angle = np.degrees(np.mean(so3.geodesic_angle(np.eye(3), draws)))
    elapsed = time.perf_counter() - t0
    ok = worst < 0.01 and zero == 0.0 and mean_angle < 25.0 and elapsed < 120.0
    _verdict(acceptance, 4, ok, f"max relative log c error {worst:.2e}, log c(0) = {zero!r}, "
             f"mean angle at 20 I {mean_angle:.2f} deg, {elapsed:.1f}s")


# ---------------------------------------------------------------- 5


def test_c5_gradients(acceptance):
    report = gradient_suite(seed=0, n_probes=20)
    ops = {k: v for k, v in report.items() if k.startswith("op/")}
    losses = {k: v for k, v in report.items() if k.startswith("loss/")}
    op_err = max(v["max_rel_error"] for v in ops.values())
    loss_err = max(v["max_rel_error"] for v in losses.values())
    probes = min(v["n_probes"] for v in report.values())
    ok = op_err < OP_TOL and loss_err < END_TO_END_TOL and probes >= 20
    _verdict(acceptance, 5, ok, f"{len(ops)} ops max error {op_err:.2e}, {len(losses)} losses max error "
             f"{loss_err:.2e}, {probes} probes each")


# ---------------------------------------------------------------- 6


def test_c6_pipeline_identity(acceptance):
    worst, exact = 0.0, True
    for seed, cat in enumerate(["humanoid", "bird", "quadruped"]):
        b, smp = generate_synthetic_character(50 + seed, category=cat)
        for p in range(3):
            posed = smp.posed_bundle(smp.sample(np.random.default_rng([seed, p])))
            res = infer(posed, b, None, None, init_only=True, plan=identity_plan(b.n_keypoints))
            worst = max(worst, np.max(np.abs(res.mesh.vertices - posed.posed.vertices)))
            net = build_transfer_net(CFG, seed)
            a = infer(posed, b, None, net, plan=identity_plan(b.n_keypoints))
            exact &= np.array_equal(a.mesh.vertices, res.mesh.vertices)
    _verdict(acceptance, 6, worst < 1e-6 and exact,
             f"self-transfer max vertex error {worst:.2e}, zero-init decoder identical: {exact}")


# ---------------------------------------------------------------- 7, 8, 9 (trained pipeline)


@pytest.fixture(scope="module")
def stage1():
    c1 = CFG.stage1
    t0 = time.perf_counter()
    train = synthetic_pairs(CFG, c1.n_train, 0, c1.n_characters, self_fraction=c1.self_pair_fraction, seed=CFG.seed)
    val = synthetic_pairs(CFG, c1.n_val, 100_000, c1.n_characters // 4, self_fraction=0.0, seed=CFG.seed + 1)
    net, log = stage1_train(train, CFG, val, eval_every=10)
    return net, train, val, time.perf_counter() - t0


@pytest.fixture(scope="module")
def stage2(stage1):
    corr = stage1[0]
    pc, c2 = CFG.prior, CFG.stage2
    t0 = time.perf_counter()
    prior, _ = prior_train(prior_dataset(CFG, pc.n_characters, pc.poses_per_character, 200_000, seed=CFG.seed), CFG)
    pairs = cycle_pairs(CFG, corr, c2.n_pairs, c2.n_characters, 400_000, c2.self_pair_fraction, CFG.seed)
    net, log = stage2_train(pairs, corr, prior, CFG)
    return net, log, time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy():
    return toy_suite(6, 2, seed=0)


def test_c7_stage1(acceptance, stage1):
    net, train, val, seconds = stage1
    ks = [p.src.n_keypoints for p in train] + [p.tgt.n_keypoints for p in train]
    m = CFG.model
    setup = len(train) == 2000 and len(val) == 200 and min(ks) >= 4 and max(ks) <= 12
    setup &= m.d_model == 64 and m.n_layers == 2
    acc = match_accuracy(net, val)
    _verdict(acceptance, 7, setup and acc >= 0.95 and seconds < 1800,
             f"held-out match accuracy {acc:.4f} on {len(val)} pairs, {seconds / 60:.1f} min "
             f"(K in [{min(ks)}, {max(ks)}], d {m.d_model}, {m.n_layers} layers)")


def test_c8_stage2(acceptance, stage1, stage2, toy):
    net, log, seconds = stage2
    reduction = 1.0 - log.rec_final / log.rec_initial
    rep = run_cycle_benchmark(toy, stage1[0], net)
    ok = reduction >= 0.9 and rep.self_pmd < 1.0 and rep.els > 0.9 and rep.n_failed == 0 and seconds < 7200
    _verdict(acceptance, 8, ok, f"L_rec reduced {100 * reduction:.1f}%, toy suite self PMD {rep.self_pmd:.4f}, "
             f"cycle ELS {rep.els:.4f}, {seconds / 60:.1f} min")


def test_c9_arap(acceptance, stage1, stage2, toy):
    rng = np.random.default_rng(9)
    chars = [generate_synthetic_character(70 + i) for i in range(5)]
    monotone = True
    for r in range(50):
        b, smp = chars[r % 5]
        posed = smp.pose_mesh(smp.sample(rng))
        noisy = posed.with_vertices(posed.vertices + rng.uniform(0.005, 0.05) * rng.standard_normal(posed.vertices.shape))
        e = np.asarray(arap_refine(noisy, b.mesh, b.rig, posed_keypoints(noisy, b.rig)).energies)
        monotone &= bool(np.all(np.diff(e) <= 1e-12 * max(e[0], 1.0)))
    rigid = 0.0
    for b, _ in chars:
        R = so3.random_rotations(1, rng)[0]
        moved = b.mesh.with_vertices(b.mesh.vertices @ R.T + rng.standard_normal(3))
        rigid = max(rigid, np.max(np.abs(arap_refine(moved, b.mesh, b.rig, posed_keypoints(moved, b.rig)).mesh.vertices
                                         - moved.vertices)))
    corr, net = stage1[0], stage2[0]
    raw = run_cycle_benchmark(toy, corr, net)
    ref = run_cycle_benchmark(toy, corr, net, refine=True, arap_cfg=CFG.arap)
    drop = max(a["target_els"] - b["target_els"] for a, b in zip(raw.cases, ref.cases))
    ok = monotone and rigid < 1e-6 and drop <= 1e-6
    _verdict(acceptance, 9, ok, f"energy monotone on 50 runs: {monotone}, rigid displacement {rigid:.1e}, "
             f"largest ELS drop from refinement {drop:.2e} (mean {raw.target_els:.4f} -> {ref.target_els:.4f})")


# ---------------------------------------------------------------- 10


def test_c10_metrics(acceptance):
    rng = np.random.default_rng(10)
    chars = [generate_synthetic_character(80 + i)[0].mesh for i in range(4)]
    worst = 0.0
    for k in range(100):
        ref = chars[k % 4]
        pred = ref.with_vertices(ref.vertices + rng.uniform(0.001, 0.2) * rng.standard_normal(ref.vertices.shape))
        e = ref.edges()
        a, b = pred.vertices, ref.vertices
        ref_pmd = 100.0 * np.mean(np.sum((a - b) ** 2, axis=1))
        la, lb = (np.linalg.norm(x[e[:, 0]] - x[e[:, 1]], axis=1) for x in (a, b))
        ref_els = np.mean(np.minimum(la / lb, lb / la))
        worst = max(worst, abs(pmd(pred, ref) - ref_pmd), abs(els(pred, ref) - ref_els))
    half = els(chars[0].with_vertices(2.0 * chars[0].vertices), chars[0])
    _verdict(acceptance, 10, worst <= 1e-12 and abs(half - 0.5) <= 1e-12,
             f"max gap to references {worst:.1e} over 100 pairs, x2 scaling ELS {half!r}")


# ---------------------------------------------------------------- 11


TINY_CONFIG = {
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "mlp_hidden": 32, "keypoint_hidden": 32,
              "decoder_hidden": 32},
    "stage1": {"n_characters": 6, "n_val": 6, "batch": 8},
    "stage2": {"n_characters": 3, "batch": 4},
    "prior": {"n_characters": 3, "poses_per_character": 2, "batch": 4, "decoder_hidden": 16},
}


def _cli_runs(root, cfg_path):
    """Run every command once in ``root``; returns report paths by command."""
    out = {}

    def run(cmd, *extra):
        d = root / cmd
        rc = cli.main([cmd, "--seed", "11", "--config", str(cfg_path), "--out", str(d), *extra])
        assert rc == 0, f"{cmd} exited {rc}"
        out[cmd] = d / f"{cmd}.json"
        return d

    g = run("gen-synth", "--n", "2", "--poses", "1")
    names = [c["name"] for c in json.loads((g / "gen-synth.json").read_text())["characters"]]
    a, b = ([str(g / f"{n}.obj"), str(g / f"{n}.rig.json"), str(g / f"{n}_pose0.obj")] for n in names)
    run("estimate", "--mesh", a[0], "--rig", a[1], "--posed", a[2])
    corr = run("train-corr", "--n-train", "8", "--epochs", "1") / "corr.ckpt.json"
    prior = run("train-prior", "--epochs", "1") / "prior.ckpt.json"
    transfer = run("train-transfer", "--corr", str(corr), "--prior", str(prior), "--n-pairs", "4",
                   "--epochs", "1") / "transfer.ckpt.json"
    run("correspond", "--src-mesh", a[0], "--src-rig", a[1], "--tgt-mesh", b[0], "--tgt-rig", b[1],
        "--corr", str(corr))
    run("transfer", "--src-mesh", a[0], "--src-rig", a[1], "--src-posed", a[2], "--tgt-mesh", b[0],
        "--tgt-rig", b[1], "--corr", str(corr), "--transfer", str(transfer), "--arap")
    run("eval-cycle", "--corr", str(corr), "--transfer", str(transfer), "--n-characters", "2", "--poses", "1")
    run("sample-prior", "--prior", str(prior), "--mesh", a[0], "--rig", a[1], "--posed", a[2], "--n", "4")
    run("grad-check", "--probes", "20")
    return out


def test_c11_cli_determinism(acceptance, tmp_path):
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    first = _cli_runs(tmp_path / "run1", cfg_path)
    second = _cli_runs(tmp_path / "run2", cfg_path)
    differing = sorted(c for c in first if first[c].read_bytes() != second[c].read_bytes())
    commands = set(cli.build_parser()._subparsers._group_actions[0].choices)
    covered = commands <= set(first)
    _verdict(acceptance, 11, not differing and covered,
             f"{len(first)} commands run twice with --seed 11, differing reports: {differing or 'none'}, "
             f"all commands covered: {covered}")
