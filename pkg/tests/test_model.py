import numpy as np
import pytest
import torch

from facefit import model as fm


@pytest.fixture(scope="module")
def small_model():
    return fm.build_synthetic_model(seed=0, p=400)


def test_decode_shape_zero_is_mean(small_model):
    out = fm.decode_shape(small_model, torch.zeros(fm.SHAPE_DIM))
    assert torch.equal(out, small_model.mean_shape)


def test_decode_albedo_zero_is_mean(small_model):
    out = fm.decode_albedo(small_model, torch.zeros(fm.ALBEDO_DIM))
    assert torch.equal(out, small_model.mean_albedo)


def test_decode_linearity(small_model):
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = torch.from_numpy(rng.standard_normal(fm.SHAPE_DIM)).float()
        b = torch.from_numpy(rng.standard_normal(fm.SHAPE_DIM)).float()
        lhs = fm.decode_shape(small_model, a + b)
        rhs = (
            fm.decode_shape(small_model, a)
            + fm.decode_shape(small_model, b)
            - small_model.mean_shape
        )
        assert torch.allclose(lhs, rhs, atol=1e-5)


def test_decode_unit_vector_matches_loop_oracle(small_model):
    alpha = torch.zeros(fm.SHAPE_DIM)
    alpha[3] = 1.0
    out = fm.decode_shape(small_model, alpha).numpy()
    mean = small_model.mean_shape.numpy()
    basis = small_model.shape_basis.numpy()
    std = small_model.shape_std.numpy()
    expected = np.empty_like(mean)
    for i in range(small_model.p):
        for c in range(3):
            expected[i, c] = mean[i, c] + std[3] * basis[i, c, 3]
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_decode_albedo_matches_loop_oracle(small_model):
    rng = np.random.default_rng(2)
    gamma = rng.standard_normal(fm.ALBEDO_DIM)
    out = fm.decode_albedo(small_model, torch.from_numpy(gamma).double()).numpy()
    mean = small_model.mean_albedo.numpy().astype(np.float64)
    basis = small_model.albedo_basis.numpy().astype(np.float64)
    std = small_model.albedo_std.numpy().astype(np.float64)
    expected = mean.copy()
    for k in range(fm.ALBEDO_DIM):
        expected += gamma[k] * std[k] * basis[:, :, k]
    np.testing.assert_allclose(out, expected, rtol=1e-6)


def test_decode_shape_gradient_matches_finite_differences(small_model):
    rng = np.random.default_rng(3)
    alpha = torch.from_numpy(rng.standard_normal(fm.SHAPE_DIM)).double().requires_grad_(True)
    w = torch.from_numpy(rng.standard_normal((small_model.p, 3))).double()
    loss = (fm.decode_shape(small_model, alpha) * w).sum()
    (grad,) = torch.autograd.grad(loss, alpha)
    h = 1e-5
    for k in rng.choice(fm.SHAPE_DIM, size=10, replace=False):
        ap = alpha.detach().clone()
        am = alpha.detach().clone()
        ap[k] += h
        am[k] -= h
        fd = ((fm.decode_shape(small_model, ap) * w).sum() - (fm.decode_shape(small_model, am) * w).sum()) / (2 * h)
        rel = abs(fd - grad[k]) / max(abs(fd), 1e-9)
        assert rel < 1e-4


def test_decode_dimension_mismatch(small_model):
    with pytest.raises(ValueError):
        fm.decode_shape(small_model, torch.zeros(10))
    with pytest.raises(ValueError):
        fm.decode_albedo(small_model, torch.zeros(10))


def test_build_deterministic():
    m1 = fm.build_synthetic_model(seed=5, p=400)
    m2 = fm.build_synthetic_model(seed=5, p=400)
    for name in ("mean_shape", "shape_basis", "shape_std", "mean_albedo",
                 "albedo_basis", "albedo_std", "triangles", "landmark_indices"):
        assert torch.equal(getattr(m1, name), getattr(m2, name))


def test_build_rejects_tiny_p():
    with pytest.raises(ValueError):
        fm.build_synthetic_model(seed=0, p=100)


def test_std_spectrum_strictly_decreasing(small_model):
    s = small_model.shape_std.numpy()
    assert (np.diff(s) < 0).all()
    a = small_model.albedo_std.numpy()
    assert (np.diff(a) < 0).all()


@pytest.mark.parametrize("seed", range(10))
def test_no_degenerate_triangles(seed):
    m = fm.build_synthetic_model(seed=seed, p=400)
    v = m.mean_shape.numpy()
    tri = m.triangles.numpy()
    e1 = v[tri[:, 1]] - v[tri[:, 0]]
    e2 = v[tri[:, 2]] - v[tri[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    assert areas.min() > 1e-9


def test_exact_vertex_count():
    for p in (300, 557, 1562):
        assert fm.build_synthetic_model(seed=0, p=p).p == p


def test_sample_params_truncation_and_mean():
    rng = np.random.default_rng(7)
    alphas = np.stack([fm.sample_params(rng, truncation=2.0).alpha.numpy() for _ in range(10_000)])
    assert (np.abs(alphas) <= 2.0).all()
    assert np.abs(alphas.mean()) < 0.05


def test_sample_params_pose_bounds():
    rng = np.random.default_rng(8)
    for _ in range(200):
        cam = fm.sample_params(rng).cam.numpy()
        assert abs(cam[0]) <= fm.YAW_MAX
        assert abs(cam[1]) <= fm.PITCH_MAX
        assert abs(cam[2]) <= fm.ROLL_MAX
        assert abs(cam[3]) <= fm.TRANS_MAX and abs(cam[4]) <= fm.TRANS_MAX
        assert abs(cam[5]) <= fm.LOG_SCALE_MAX


def test_sample_params_ambient_positive():
    rng = np.random.default_rng(9)
    for _ in range(50):
        phi = fm.sample_params(rng).phi.numpy().reshape(3, 9)
        assert (phi[:, 0] > 0).all()


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(10)
    vec = torch.from_numpy(rng.standard_normal(fm.PARAM_DIM)).float()
    params = fm.LatentParams.unpack(vec)
    assert params.alpha.shape == (fm.SHAPE_DIM,)
    assert torch.equal(params.pack(), vec)
    batched = torch.from_numpy(rng.standard_normal((4, fm.PARAM_DIM))).float()
    assert torch.equal(fm.LatentParams.unpack(batched).pack(), batched)


def test_unpack_rejects_bad_length():
    with pytest.raises(ValueError):
        fm.LatentParams.unpack(torch.zeros(100))


def test_serialization_roundtrip(tmp_path, small_model):
    path = tmp_path / "model.bin"
    fm.save_model(small_model, path)
    loaded = fm.load_model(path)
    for name in ("mean_shape", "shape_basis", "shape_std", "mean_albedo",
                 "albedo_basis", "albedo_std", "triangles", "landmark_indices"):
        assert torch.equal(getattr(small_model, name), getattr(loaded, name))
    assert fm.model_hash(loaded) == fm.model_hash(small_model)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a model")
    with pytest.raises(ValueError):
        fm.load_model(path)
