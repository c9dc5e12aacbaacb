import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posetransfer import so3
from posetransfer.meshcore import (Mesh, PoseTransforms, Rig, apply_lbs, estimate_keypoint_transforms,
                                   posed_keypoints)


def tetra():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(v, f)


def test_mesh_validation():
    with pytest.raises(ValueError):
        Mesh(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Mesh(np.zeros((4, 2)), np.zeros((0, 3)))
    with pytest.raises(ValueError, match="out of range"):
        Mesh(np.zeros((4, 3)), [[0, 1, 4]])
    with pytest.raises(ValueError, match="degenerate"):
        Mesh(np.zeros((4, 3)), [[0, 1, 1]])
    m = tetra()
    assert m.edges().shape == (6, 2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0  # read-only


def test_rig_validation():
    c = np.zeros((2, 3))
    with pytest.raises(ValueError, match="sum to 1"):
        Rig(c, ["a", "b"], np.full((4, 2), 0.4))
    with pytest.raises(ValueError, match="non-negative"):
        Rig(c, ["a", "b"], np.array([[1.5, -0.5]] * 4))
    with pytest.raises(ValueError, match="names"):
        Rig(c, ["a"], np.full((4, 2), 0.5))
    with pytest.raises(ValueError, match="parent"):
        Rig(c, ["a", "b"], np.full((4, 2), 0.5), parents=[-1, 5])
    with pytest.raises(ValueError):
        Rig.from_sparse(c, ["a", "b"], [[(3, 1.0)]])
    r = Rig.from_sparse(c, ["a", "b"], [[(0, 1.0)], [(0, 0.5), (1, 0.5)], [(1, 1.0)], [(1, 1.0)]])
    assert r.sparse_weights()[1] == [(0, 0.5), (1, 0.5)]
    with pytest.raises(ValueError):
        r.check_mesh(Mesh(np.zeros((5, 3)), np.zeros((0, 3))))


def test_pose_transforms_validation():
    with pytest.raises(ValueError):
        PoseTransforms(np.array([[2.0, 0, 0, 0]]), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        PoseTransforms(np.array([[1.0, 0, 0, 0]]), np.zeros((2, 3)))


def test_rest_pose_is_identity(characters):
    for b, _ in characters:
        posed = apply_lbs(b.mesh, b.rig, PoseTransforms.rest(b.rig))
        assert np.allclose(posed.vertices, b.mesh.vertices, atol=1e-12)


def test_single_keypoint_rigid_motion(rng):
    m = tetra()
    rig = Rig(np.array([[0.2, 0.1, 0.0]]), ["root"], np.ones((4, 1)))
    R = so3.random_rotations(1, rng)[0]
    t = rng.standard_normal(3)
    posed = apply_lbs(m, rig, PoseTransforms.from_matrices(R[None], t[None]))
    assert np.allclose(posed.vertices, (m.vertices - rig.keypoints[0]) @ R.T + t, atol=1e-12)


def test_lbs_global_equivariance(characters, rng):
    b, smp = characters[0]
    T = smp.sample(rng)
    Rg = so3.random_rotations(1, rng)[0]
    tg = rng.standard_normal(3)
    a = apply_lbs(b.mesh, b.rig, T.compose_left(Rg, tg))
    c = apply_lbs(b.mesh, b.rig, T)
    assert np.allclose(a.vertices, c.vertices @ Rg.T + tg, atol=1e-10)


@given(st.integers(0, 10**6))
def test_estimate_round_trip(seed):
    from posetransfer.evalbench.synth import generate_synthetic_character

    b, smp = generate_synthetic_character(seed % 50)
    T = smp.sample(np.random.default_rng(seed))
    posed = apply_lbs(b.mesh, b.rig, T)
    est = estimate_keypoint_transforms(b.mesh, posed, b.rig)
    assert not est.degenerate
    assert np.max(so3.geodesic_angle(est.matrices, T.matrices)) < 1e-6
    assert np.allclose(est.translations, T.translations, atol=1e-6)
    assert np.allclose(apply_lbs(b.mesh, b.rig, est).vertices, posed.vertices, atol=1e-8)


def test_estimate_flags_degenerate_keypoint():
    m = tetra()
    w = np.zeros((4, 2))
    w[:, 0] = 1.0
    rig = Rig(np.zeros((2, 3)), ["a", "b"], w)
    est = estimate_keypoint_transforms(m, m, rig)
    assert est.degenerate == (1,)
    assert np.allclose(est.matrices[1], np.eye(3))


def test_estimate_requires_matching_meshes():
    m = tetra()
    rig = Rig(np.zeros((1, 3)), ["a"], np.ones((4, 1)))
    other = Mesh(m.vertices, [[0, 1, 2]])
    with pytest.raises(ValueError):
        estimate_keypoint_transforms(m, other, rig)


def test_posed_keypoints(characters):
    b, _ = characters[1]
    c = posed_keypoints(b.mesh, b.rig)
    w = b.rig.skin_weights
    assert np.allclose(c, (w.T @ b.mesh.vertices) / w.sum(axis=0)[:, None])
