import numpy as np
import pytest

import huproso3


def test_haar_samples_are_rotations():
    r = huproso3.haar_sample(50, manifolds=2, seed=1)
    assert r.shape == (50, 2, 3, 3)
    eye = np.einsum("bnji,bnjk->bnik", r, r)
    assert np.allclose(eye, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(r), 1.0, atol=1e-12)
    assert np.array_equal(r, huproso3.haar_sample(50, manifolds=2, seed=1))


def test_geodesic_distance_of_quarter_turn():
    a = np.eye(3).reshape(1, 1, 3, 3)
    b = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).reshape(1, 1, 3, 3)
    assert huproso3.geodesic_distance(a, b)[0, 0] == pytest.approx(np.pi / 2, abs=1e-12)
    assert huproso3.mgeo(a, a) == 0.0


def test_identity_model_is_uniform():
    m = huproso3.FlowModel(num_manifolds=3, num_blocks=2, seed=0)
    poses, lp = m.sample(20, seed=3)
    assert poses.shape == (20, 3, 3, 3)
    assert np.all(lp == 0.0)
    assert np.allclose(poses, huproso3.haar_sample(20, manifolds=3, seed=3), atol=1e-12)


def test_perturbed_model_roundtrip_and_consistency(tmp_path):
    m = huproso3.FlowModel(num_manifolds=4, num_blocks=3, seed=1)
    m.perturb(0.1, seed=2)
    poses, lp = m.sample(30, seed=4)
    assert np.allclose(m.log_prob(poses), lp, atol=1e-8)
    base, lp_back = m.pull_back(poses)
    assert np.allclose(base, huproso3.haar_sample(30, manifolds=4, seed=4), atol=1e-9)
    assert np.allclose(lp_back, lp, atol=1e-9)

    path = str(tmp_path / "m.ckpt")
    m.save(path)
    loaded = huproso3.FlowModel.load(path)
    assert np.array_equal(loaded.log_prob(poses), m.log_prob(poses))


def test_conditional_model_and_skeleton():
    skel = huproso3.Skeleton.default("humanoid-19")
    assert skel.num_joints == 25
    assert skel.num_rotations == 19
    m = huproso3.FlowModel(num_manifolds=19, num_blocks=1, context_dim=64, num_keypoints=25, keypoint_dim=3)
    poses = huproso3.haar_sample(2, manifolds=19, seed=5)
    kp = skel.forward_kinematics(poses)[0]
    assert kp.shape == (25, 3)
    ctx = m.encode_context(kp, [1] * 20 + [0] * 5)
    assert ctx.shape == (64,)
    samples, lp = m.sample(4, seed=6, context=ctx)
    assert samples.shape == (4, 19, 3, 3)
    assert np.allclose(m.log_prob(samples, ctx), lp, atol=1e-8)
    assert skel.mpjpe(poses[:1], poses[:1]) == 0.0


def test_dataset_generation_has_oracle_densities(tmp_path):
    ds = huproso3.generate_dataset(joints=3, components=2, n=100, spec_seed=1, seed=2)
    assert ds["poses"].shape == (100, 3, 3, 3)
    assert ds["log_density"].shape == (100,)
    assert np.all(np.isfinite(ds["log_density"]))


def test_bad_inputs_raise(tmp_path):
    with pytest.raises(ValueError):
        huproso3.FlowModel(num_manifolds=3).log_prob(np.zeros((2, 3, 3)))
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a dataset")
    with pytest.raises(ValueError):
        huproso3.read_dataset(str(bad))
