import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posetransfer import softmatch


def brute_force(score):
    K1, K2 = score.shape
    best = -np.inf
    if K1 <= K2:
        for perm in itertools.permutations(range(K2), K1):
            best = max(best, score[np.arange(K1), list(perm)].sum())
    else:
        for perm in itertools.permutations(range(K1), K2):
            best = max(best, score[list(perm), np.arange(K2)].sum())
    return best


@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 6))
def test_hungarian_matches_brute_force(seed, k1, k2):
    s = np.random.default_rng(seed).standard_normal((k1, k2))
    pairs = softmatch.hungarian(s)
    assert len(pairs) == min(k1, k2)
    assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
    assert np.isclose(sum(s[i, j] for i, j in pairs), brute_force(s), atol=1e-12)


def test_hungarian_ties_are_lexicographic():
    assert softmatch.hungarian(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]
    assert softmatch.hungarian(np.ones((2, 4))) == [(0, 0), (1, 1)]
    assert softmatch.hungarian(np.ones((4, 2))) == [(0, 0), (1, 1)]


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        softmatch.hungarian(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        softmatch.hungarian(np.array([[np.nan]]))


@given(st.integers(0, 10**6), st.integers(1, 20), st.integers(1, 20))
def test_sinkhorn_marginals(seed, k1, k2):
    s = np.random.default_rng(seed).uniform(0.05, 1.0, (k1, k2))
    m = softmatch.sinkhorn(s, iters=200, tol=1e-9)
    assert np.allclose(m.sum(axis=1), 1.0 / k1, atol=1e-6)
    assert np.allclose(m.sum(axis=0), 1.0 / k2, atol=1e-9)
    assert np.all(m >= 0)


@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_sinkhorn_scale_invariance(seed, c):
    s = np.random.default_rng(seed).uniform(0.05, 1.0, (5, 7))
    assert np.allclose(softmatch.sinkhorn(s, 100, 0.0), softmatch.sinkhorn(c * s, 100, 0.0), atol=1e-10)


def test_sinkhorn_degenerate_shapes():
    assert np.allclose(softmatch.sinkhorn(np.array([[3.0]])), [[1.0]])
    row = softmatch.sinkhorn(np.array([[1.0, 2.0, 3.0]]))
    assert np.allclose(row, [[1 / 3, 1 / 3, 1 / 3]])


def test_sinkhorn_rejects_bad_input():
    with pytest.raises(ValueError):
        softmatch.sinkhorn(np.array([[1.0, -1.0]]))
    with pytest.raises(ValueError):
        softmatch.sinkhorn(np.array([[1.0, np.inf]]))
    with pytest.raises(ValueError):
        softmatch.sinkhorn_log(np.zeros((2, 2)), iters=0)


def test_sinkhorn_log_handles_large_logits():
    x = np.array([[800.0, 0.0], [0.0, 800.0]])
    m = softmatch.sinkhorn_log(x)
    assert np.all(np.isfinite(m))
    assert np.allclose(m, np.eye(2) / 2, atol=1e-12)


def test_canonical_tokens_group_limbs():
    assert softmatch.canonical_token("LeftWing_2") == "left_limb_2"
    assert softmatch.canonical_token("left_arm_2") == "left_limb_2"
    assert softmatch.canonical_token("r_claw_1") == "right_leg_1"
    assert softmatch.canonical_token("Tail") == "tail"


def test_text_similarity_semantics():
    s = softmatch.text_similarity(["left_arm_1", "head", "tail_1"], ["left_wing_1", "head", "spine_1"])
    assert s.shape == (3, 3)
    assert np.isclose(s[0, 0], 1.0) and np.isclose(s[1, 1], 1.0)
    assert s[2, 2] < 1.0
    assert np.all(np.abs(s) <= 1.0)


def test_embedding_table_and_tsv(tmp_path):
    emb = softmatch.LabelEmbeddings({"a": [1.0, 0.0], "b": [3.0, 4.0]})
    assert np.allclose(emb["b"], [0.6, 0.8])
    assert emb.matrix(["a", "zzz"]).shape == (2, 2)
    path = tmp_path / "e.tsv"
    emb.save_tsv(path)
    again = softmatch.LabelEmbeddings.load_tsv(path)
    assert np.array_equal(again["b"], emb["b"])
    with pytest.raises(ValueError):
        softmatch.LabelEmbeddings({"a": [0.0, 0.0]})
    with pytest.raises(ValueError):
        softmatch.LabelEmbeddings({"a": [1.0], "b": [1.0, 2.0]})
    bad = tmp_path / "bad.tsv"
    bad.write_text("no-tab-here\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        softmatch.LabelEmbeddings.load_tsv(bad)


def test_gt_targets():
    s = softmatch.text_similarity(["spine_1", "head", "left_leg_1"], ["head", "spine_1", "left_leg_1", "tail_1"])
    m_sink, m_hung = softmatch.build_gt_targets(s, tau=0.1, iters=200, tol=0.0)
    assert np.allclose(m_sink.sum(axis=0), 0.25)
    assert np.isclose(m_hung.sum(), 1.0)
    assert m_hung[0, 1] > 0 and m_hung[1, 0] > 0 and m_hung[2, 2] > 0
