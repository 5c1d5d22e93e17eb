import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mwgs.errors import BehindCamera, InvalidParameter, NumericalDegeneracy
from mwgs.scene import (Anchor, Camera, GaussianPrimitive, axis_angle_quat, build_covariance,
                        build_covariance_backward, eval_gaussian, expand_anchor, load_scene,
                        project_point, quat_multiply, quat_to_rotmat, save_scene)

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 0.1).map(np.array)
scales = st.lists(st.floats(0.05, 3.0), min_size=3, max_size=3).map(np.array)


def test_covariance_examples():
    assert np.allclose(build_covariance(IDENTITY, np.ones(3)), np.eye(3))
    assert np.allclose(build_covariance(IDENTITY, [2, 1, 1]), np.diag([4, 1, 1]))
    q = axis_angle_quat([0, 0, 1], np.pi / 2)
    assert np.allclose(build_covariance(q, [2, 1, 1]), np.diag([1, 4, 1]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(quats, scales)
def test_covariance_eigenvalues_are_squared_scales(q, s):
    cov = build_covariance(q, s)
    assert np.allclose(cov, cov.T, atol=1e-14)
    assert np.allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(s**2), atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(quats, quats, scales)
def test_covariance_rotation_equivariance(q, q0, s):
    qn = q / np.linalg.norm(q)
    R = quat_to_rotmat(qn)
    lhs = build_covariance(quat_multiply(qn, q0 / np.linalg.norm(q0)), s)
    assert np.allclose(lhs, R @ build_covariance(q0, s) @ R.T, atol=1e-9)


def test_covariance_rejects_non_finite():
    with pytest.raises(InvalidParameter):
        build_covariance([np.nan, 0, 0, 1], [1, 1, 1])


def test_covariance_backward_matches_finite_differences(rng):
    q, s = rng.normal(size=4), rng.uniform(0.5, 2, 3)
    G = rng.normal(size=(3, 3))
    dq, ds = build_covariance_backward(q, s, G)
    eps = 1e-6
    for arr, grad in ((q, dq), (s, ds)):
        for i in range(arr.size):
            old = arr[i]
            arr[i] = old + eps
            hi = np.sum(build_covariance(q, s) * G)
            arr[i] = old - eps
            lo = np.sum(build_covariance(q, s) * G)
            arr[i] = old
            assert abs((hi - lo) / (2 * eps) - grad[i]) < 1e-6


def make_anchor(k=3, offsets=None, log_scale=np.zeros(3)):
    return Anchor(position=np.array([1.0, 2.0, 3.0]), log_scale=log_scale,
                  offsets=np.zeros((k, 3)) if offsets is None else offsets, feature=np.zeros(4),
                  opacity_logits=np.zeros(k), rotations=np.tile(IDENTITY, (k, 1)),
                  log_scales=np.zeros((k, 3)))


def test_expand_anchor_examples():
    a = make_anchor()
    gs = expand_anchor(a)
    assert len(gs) == 3
    assert all(np.array_equal(g.mean, a.position) for g in gs)
    assert all(g.opacity == 0.5 for g in gs)
    off = np.zeros((3, 3))
    off[0] = [1, 0, 0]
    assert np.allclose(expand_anchor(make_anchor(offsets=off))[0].mean, [2, 2, 3])


def test_expand_anchor_is_linear_in_offsets(rng):
    off = rng.normal(size=(3, 3))
    lv = np.log([0.5, 2.0, 1.5])
    d1 = expand_anchor(make_anchor(offsets=off, log_scale=lv))[1].mean - [1, 2, 3]
    d2 = expand_anchor(make_anchor(offsets=2 * off, log_scale=lv))[1].mean - [1, 2, 3]
    assert np.allclose(d2, 2 * d1)


def test_anchor_shape_validation():
    with pytest.raises(InvalidParameter):
        Anchor(position=np.zeros(3), log_scale=np.zeros(3), offsets=np.zeros((2, 3)),
               feature=np.zeros(4), opacity_logits=np.zeros(3), rotations=np.zeros((2, 4)),
               log_scales=np.zeros((2, 3)))


def test_eval_gaussian_examples():
    g = GaussianPrimitive(np.zeros(3), np.eye(3), 0.5)
    assert eval_gaussian(g, np.zeros(3)) == 1.0
    assert np.isclose(eval_gaussian(g, [1, 0, 0]), np.exp(-0.5))
    d = np.array([0.3, -0.2, 0.7])
    assert eval_gaussian(g, d) == eval_gaussian(g, -d)
    with pytest.raises(NumericalDegeneracy):
        eval_gaussian(GaussianPrimitive(np.zeros(3), np.zeros((3, 3)), 0.5), d)


def axis_camera():
    return Camera(32, 24, 40.0, 30.0, 16.0, 12.0, IDENTITY, np.zeros(3))


def test_project_point_examples():
    cam = axis_camera()
    assert project_point(cam, [0, 0, 1]) == (16.0, 12.0, 1.0)
    u1, v1, _ = project_point(cam, [0.2, -0.1, 1.0])
    u2, v2, _ = project_point(cam, [0.2, -0.1, 2.0])
    assert np.isclose(u2 - 16, (u1 - 16) / 2) and np.isclose(v2 - 12, (v1 - 12) / 2)
    with pytest.raises(BehindCamera):
        project_point(cam, [0, 0, -1])


def test_camera_invariants():
    with pytest.raises(InvalidParameter):
        Camera(32, 24, 0.0, 30.0, 16, 12, IDENTITY, np.zeros(3))
    with pytest.raises(InvalidParameter):
        Camera(32, 24, 40.0, 30.0, 16, 12, np.array([1.0, 1.0, 0, 0]), np.zeros(3))


def test_look_at_is_a_proper_rotation_facing_target():
    cam = Camera.look_at([3, 1, 2], [0, 0, 0], [0, 0, 1], 64, 48, 50)
    R = cam.rotation
    assert np.isclose(np.linalg.det(R), 1.0)
    assert np.allclose(cam.to_camera([0, 0, 0])[:2], 0, atol=1e-12)
    # world up points towards negative image v
    assert (R @ np.array([0, 0, 1.0]))[1] < 0


def test_scene_roundtrip_is_lossless(tmp_path, rng):
    cam = Camera.look_at(rng.normal(size=3) + 5, [0, 0, 0], [0, 0, 1], 64, 48, 47.3)
    a = make_anchor()
    a.offsets = rng.normal(size=(3, 3))
    save_scene(tmp_path / "scene.json", [cam], [a], {"k": 3})
    cams, anchors, cfg = load_scene(tmp_path / "scene.json")
    assert cams[0].to_dict() == cam.to_dict()
    assert np.array_equal(anchors[0].offsets, a.offsets)
    assert cfg == {"k": 3}
