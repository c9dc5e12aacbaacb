import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posetransfer import softmatch
from posetransfer.nn import autodiff as ad
from posetransfer.nn import ops
from posetransfer.nn.gradcheck import check_gradients, relative_error
from posetransfer.nn.layers import (CrossAttentionBlock, Linear, TransformerConfig, TransformerEncoder)
from posetransfer.nn.optim import AdamW, adamw_update, cosine_lr, load_checkpoint, save_checkpoint
from posetransfer.pipeline.diagnostics import OP_TOL, op_gradient_checks

SMALL = TransformerConfig(d_model=16, n_layers=2, n_heads=4, mlp_hidden=32, keypoint_hidden=32, decoder_hidden=32)


@pytest.fixture(scope="module")
def op_results():
    return op_gradient_checks(seed=0, n_probes=20)


def test_every_op_passes_gradcheck(op_results):
    bad = {k: r.max_rel_error for k, r in op_results.items() if not r.passed(OP_TOL)}
    assert not bad
    assert all(r.n_probes >= 20 for r in op_results.values())


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0 + 1e-6) < 1e-5


@given(st.integers(0, 10**6))
def test_broadcast_gradients(seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.standard_normal((3, 1, 4)))
    b = ad.parameter(rng.standard_normal((5, 1)))
    loss = ad.tsum((a * b + a) ** 2)
    loss.backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    res = check_gradients(lambda: ad.tsum((a * b + a) ** 2), [a, b], 10, seed=seed)
    assert res.passed(1e-6)


def test_graph_errors():
    x = ad.parameter(np.ones(3))
    y = ad.tsum(x * 2.0)
    y.backward()
    assert np.allclose(x.grad, 2.0)
    with pytest.raises(ad.GraphError):
        y.backward()
    with pytest.raises(ad.GraphError):
        ad.tsum(x).detach().backward()
    with pytest.raises(ad.GraphError):
        (x * 2.0).backward()  # non-scalar without gradient


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.tsum(x * 3.0)
    assert not y.requires_grad
    with pytest.raises(ad.GraphError):
        y.backward()


def test_gradients_accumulate_over_reuse():
    x = ad.parameter(np.array([2.0]))
    y = x * x + x
    ad.tsum(y).backward()
    assert np.allclose(x.grad, [5.0])


def test_sinkhorn_op_matches_reference(rng):
    logits = rng.standard_normal((1, 4, 6)) * 3
    out = ops.sinkhorn(ad.Tensor(logits), iters=50)
    ref = softmatch.sinkhorn_log(logits[0], 50, 0.0)
    assert np.allclose(out.data[0], ref, atol=1e-14)


def test_sinkhorn_op_masks_padding(rng):
    logits = rng.standard_normal((1, 5, 5))
    rm = np.array([[True, True, True, False, False]])
    cm = np.array([[True, True, True, True, False]])
    out = ops.sinkhorn(ad.Tensor(logits), rm, cm, iters=50).data[0]
    assert np.all(out[3:] == 0) and np.all(out[:, 4:] == 0)
    assert np.allclose(out[:3, :4], softmatch.sinkhorn_log(logits[0, :3, :4], 50, 0.0), atol=1e-14)


def test_quat_to_mat_and_eigh_top(rng):
    from posetransfer import so3

    q = so3.random_quaternions(4, rng)
    assert np.allclose(ops.quat_to_mat(ad.Tensor(q)).data, so3.attitude(q), atol=1e-12)
    a = rng.standard_normal((4, 4))
    m = a @ a.T
    v = ops.eigh_top(ad.Tensor(m)).data
    w, V = np.linalg.eigh(m)
    assert np.isclose(abs(v @ V[:, -1]), 1.0)


def test_fisher_op_matches_numpy(rng):
    from posetransfer import fisher

    F = rng.standard_normal((3, 3, 3))
    assert np.allclose(ops.fisher_log_c(ad.Tensor(F)).data, fisher.log_normalizer(F), atol=1e-12)


def test_linear_init_and_shapes(rng):
    lin = Linear(8, 3, rng)
    assert lin(ad.Tensor(np.zeros((2, 5, 8)))).shape == (2, 5, 3)
    z = Linear(8, 3, rng, zero=True)
    assert np.all(z.weight.data == 0)


def test_encoder_padding_and_permutation_invariance(rng):
    enc = TransformerEncoder(SMALL, rng)
    for p in enc.parameters():  # move the zero-initialized projections off zero
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((1, 5, 16))
    mask = np.array([[True] * 5])
    base = enc(ad.Tensor(x), mask).data
    perm = rng.permutation(5)
    assert np.allclose(enc(ad.Tensor(x[:, perm]), mask).data, base[:, perm], atol=1e-12)
    padded = np.concatenate([x, rng.standard_normal((1, 3, 16))], axis=1)
    pmask = np.array([[True] * 5 + [False] * 3])
    assert np.allclose(enc(ad.Tensor(padded), pmask).data[:, :5], base, atol=1e-12)


def test_cross_attention_ignores_masked_keys(rng):
    blk = CrossAttentionBlock(16, 4, rng)
    for p in blk.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    q = rng.standard_normal((1, 3, 16))
    kv = rng.standard_normal((1, 6, 16))
    mask = np.array([[True] * 4 + [False] * 2])
    a = blk(ad.Tensor(q), ad.Tensor(kv), mask).data
    kv2 = kv.copy()
    kv2[:, 4:] = 100.0
    assert np.allclose(blk(ad.Tensor(q), ad.Tensor(kv2), mask).data, a, atol=1e-12)


def test_adamw_matches_reference_formula():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, 0.1])
    new, m, v = adamw_update(p, g, np.zeros(2), np.zeros(2), 1, lr=0.1, weight_decay=0.01)
    # first step: m_hat = g, v_hat = g^2 -> update = lr * sign(g) (up to eps)
    assert np.allclose(new, p * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8))


def test_adamw_minimizes_quadratic():
    x = ad.parameter(np.array([3.0, -4.0]))
    opt = AdamW([x], lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        ad.tsum(x * x).backward()
        opt.step()
    assert np.all(np.abs(x.data) < 1e-2)


def test_adamw_skips_nonfinite_and_clips():
    x = ad.parameter(np.array([1.0]))
    opt = AdamW([x], lr=0.1, clip_norm=1e-3)
    x.grad = np.array([np.nan])
    assert not opt.step() and opt.skipped == 1 and x.data[0] == 1.0
    x.grad = np.array([1e6])
    assert opt.step()
    assert np.isclose(opt.last_grad_norm, 1e6)


def test_cosine_lr():
    assert cosine_lr(1.0, 0, 100) == 1.0
    assert np.isclose(cosine_lr(1.0, 99, 100), 0.02)
    assert cosine_lr(1.0, 0, 1) == 1.0


def test_checkpoint_round_trip(tmp_path, rng):
    enc = TransformerEncoder(SMALL, rng)
    for p in enc.parameters():
        p.data = rng.standard_normal(p.shape)
    path = tmp_path / "ck.json"
    save_checkpoint(path, enc.state_dict(), {"note": "x"})
    state, meta = load_checkpoint(path)
    other = TransformerEncoder(SMALL, np.random.default_rng(99))
    other.load_state_dict(state)
    for (n1, a), (n2, b) in zip(enc.named_parameters(), other.named_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data)
    assert meta == {"note": "x"}
    with pytest.raises(KeyError):
        other.load_state_dict({})
    bad = dict(state)
    k = next(iter(bad))
    bad[k] = np.zeros((1, 1, 1))
    with pytest.raises(ValueError):
        other.load_state_dict(bad)
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")


def test_paper_scale_config():
    cfg = TransformerConfig.full_size()
    assert (cfg.d_model, cfg.n_layers, cfg.n_heads) == (256, 6, 8)
    with pytest.raises(ValueError):
        TransformerConfig(d_model=10, n_heads=4)
