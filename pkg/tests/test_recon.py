import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import small_geometry
from pactrecon.errors import DivergenceError, ShapeError, UsageError
from pactrecon.geometry import desk_geometry
from pactrecon.operator import apply_forward, build_system_matrix, calibrate_amplitude
from pactrecon.recon import (
    IstaParams,
    TvParams,
    ista_l1_reconstruct,
    operator_norm_estimate,
    smoothed_tv_gradient,
    smoothed_tv_value,
    soft_threshold,
    tv_gd_reconstruct,
    ubp_reconstruct,
    write_trace_csv,
)


def brute_tv(p, eps):
    ny, nx = p.shape
    total = 0.0
    for i in range(ny):
        for j in range(nx):
            dx = p[i, j + 1] - p[i, j] if j + 1 < nx else 0.0
            dy = p[i + 1, j] - p[i, j] if i + 1 < ny else 0.0
            total += np.sqrt(dx * dx + dy * dy + eps * eps)
    return total


# -- TV ------------------------------------------------------------------------


def test_tv_constant_image():
    assert smoothed_tv_value(np.full((5, 7), 2.5), 0.1) == pytest.approx(35 * 0.1)
    assert not np.any(smoothed_tv_gradient(np.full((5, 7), 2.5), 0.1))


def test_tv_hand_case():
    p = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert smoothed_tv_value(p, 1e-12) == pytest.approx(2.0, abs=1e-9)


def test_tv_value_matches_loop(rng):
    p = rng.standard_normal((6, 9))
    assert smoothed_tv_value(p, 0.3) == pytest.approx(brute_tv(p, 0.3), rel=1e-13)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-10, 10)), st.floats(-5, 5))
def test_tv_shift_invariance(p, c):
    assert smoothed_tv_value(p + c, 0.01) == pytest.approx(smoothed_tv_value(p, 0.01), rel=1e-9)
    assert np.allclose(smoothed_tv_gradient(p + c, 0.01), smoothed_tv_gradient(p, 0.01), atol=1e-6)


def test_tv_gradient_finite_differences():
    for seed in range(50):
        r = np.random.default_rng(seed)
        p = r.standard_normal((8, 8))
        v = r.standard_normal((8, 8))
        eps, h = 0.1, 1e-6
        fd = (smoothed_tv_value(p + h * v, eps) - smoothed_tv_value(p - h * v, eps)) / (2 * h)
        an = np.vdot(smoothed_tv_gradient(p, eps), v)
        assert abs(fd - an) <= 1e-6 * max(abs(an), 1.0)


# -- iterative solvers ---------------------------------------------------------


@pytest.fixture(scope="module")
def problem32():
    geo = calibrate_amplitude(desk_geometry(n=32, n_detectors=32))
    A = build_system_matrix(geo)
    rng = np.random.default_rng(3)
    p = np.zeros(geo.image_shape)
    p[8:20, 10:14] = 1.0
    b = apply_forward(A, p) + 0.01 * rng.standard_normal(geo.sinogram_shape)
    return geo, A, b


def test_tv_descent_is_monotone(problem32):
    _, A, b = problem32
    lam = 0.9 / operator_norm_estimate(A) ** 2
    _, trace = tv_gd_reconstruct(A, b, TvParams(step=lam, alpha=0.0, n_iters=50), return_trace=True)
    obj = np.array([t[3] for t in trace])
    assert len(trace) == 51 and trace[0][0] == 0
    assert np.all(np.diff(obj) <= 1e-12 * obj[0])


def test_ista_descent_is_monotone(problem32):
    _, A, b = problem32
    lam = 1.0 / operator_norm_estimate(A) ** 2
    _, trace = ista_l1_reconstruct(A, b, IstaParams(step=lam, alpha=1e-3, n_iters=50), return_trace=True)
    obj = np.array([t[3] for t in trace])
    assert np.all(np.diff(obj) <= 1e-12 * obj[0])


def test_tv_first_iterate_from_zero_is_scaled_adjoint(A16, rng):
    from pactrecon.operator import apply_adjoint

    b = rng.standard_normal(A16.sinogram_shape)
    p = tv_gd_reconstruct(A16, b, TvParams(step=0.7, alpha=0.0, n_iters=1))
    assert np.allclose(p, 0.7 * apply_adjoint(A16, b), rtol=1e-14, atol=0)


def test_tv_consistent_data_fixed_point(A16, rng):
    p = rng.standard_normal(A16.image_shape)
    b = apply_forward(A16, p)
    out = tv_gd_reconstruct(A16, b, TvParams(step=1.0, alpha=0.0, n_iters=3), init=p)
    assert np.max(np.abs(out - p)) <= 1e-10


def test_tv_least_squares_convergence():
    geo = calibrate_amplitude(small_geometry(16, 32, span=360.0))
    A = build_system_matrix(geo)
    rng = np.random.default_rng(1)
    b = apply_forward(A, rng.random(geo.image_shape))
    from pactrecon.operator import data_consistency_gradient

    g0 = np.linalg.norm(data_consistency_gradient(A, np.zeros(geo.image_shape), b))
    p = tv_gd_reconstruct(A, b, TvParams(step=0.9, alpha=0.0, n_iters=200))
    g1 = np.linalg.norm(data_consistency_gradient(A, p, b))
    assert g1 <= g0 / 10


def test_tv_nonneg_projection(A16, rng):
    b = rng.standard_normal(A16.sinogram_shape)
    p = tv_gd_reconstruct(A16, b, TvParams(step=1.0, alpha=0.01, n_iters=5, nonneg=True))
    assert np.all(p >= 0)


def test_tv_divergence_detected(A16, rng):
    b = rng.standard_normal(A16.sinogram_shape)
    with pytest.raises(DivergenceError) as info:
        tv_gd_reconstruct(A16, b, TvParams(step=1e200, alpha=0.0, n_iters=20))
    assert info.value.index is not None


def test_param_validation():
    with pytest.raises(UsageError):
        TvParams(step=0)
    with pytest.raises(UsageError):
        TvParams(alpha=-1)
    with pytest.raises(UsageError):
        TvParams(eps=0)
    with pytest.raises(UsageError):
        IstaParams(n_iters=0)


def test_soft_threshold():
    x = np.array([-3.0, -0.5, 0.0, 0.2, 2.0])
    assert np.array_equal(soft_threshold(x, 1.0), [-2.0, 0.0, 0.0, 0.0, 1.0])


def test_ista_zero_alpha_matches_gradient_descent(A16, rng):
    b = rng.standard_normal(A16.sinogram_shape)
    a = ista_l1_reconstruct(A16, b, IstaParams(step=0.8, alpha=0.0, n_iters=5))
    g = tv_gd_reconstruct(A16, b, TvParams(step=0.8, alpha=0.0, n_iters=5))
    assert np.allclose(a, g, rtol=1e-13, atol=1e-15)


def test_trace_csv(tmp_path, A16, rng):
    b = rng.standard_normal(A16.sinogram_shape)
    _, trace = tv_gd_reconstruct(A16, b, TvParams(n_iters=3, step=0.5), return_trace=True)
    write_trace_csv(trace, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iteration", "data_term", "reg_term", "total"]
    assert len(rows) == 5
    assert float(rows[2][3]) == trace[1][3]


# -- UBP -----------------------------------------------------------------------


def test_ubp_zero_sinogram():
    geo = desk_geometry(n=16, n_detectors=8)
    assert not np.any(ubp_reconstruct(geo, np.zeros(geo.sinogram_shape)))


def test_ubp_linearity(rng):
    geo = desk_geometry(n=16, n_detectors=8)
    b1, b2 = rng.standard_normal((2,) + geo.sinogram_shape)
    lhs = ubp_reconstruct(geo, b1 + b2)
    rhs = ubp_reconstruct(geo, b1) + ubp_reconstruct(geo, b2)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(lhs)


def test_ubp_point_source_full_ring():
    geo = calibrate_amplitude(desk_geometry(n=32, n_detectors=64, angular_span=360))
    A = build_system_matrix(geo)
    for i, j in [(8, 20), (24, 9), (12, 12), (20, 26)]:
        p = np.zeros(geo.image_shape)
        p[i, j] = 1.0
        img = ubp_reconstruct(geo, apply_forward(A, p))
        k = np.unravel_index(np.argmax(img), img.shape)
        assert max(abs(k[0] - i), abs(k[1] - j)) <= 1


def test_ubp_shape_check():
    geo = desk_geometry(n=16, n_detectors=8)
    with pytest.raises(ShapeError):
        ubp_reconstruct(geo, np.zeros((3, 3)))


def test_ubp_out_of_window_samples_counted():
    from dataclasses import replace

    geo = desk_geometry(n=16, n_detectors=8)
    short = replace(geo, n_samples=geo.n_samples // 2)
    img, n_out = ubp_reconstruct(short, np.ones(short.sinogram_shape), return_out_of_window=True)
    assert n_out > 0
    assert np.all(np.isfinite(img))
    # pixels with no in-window contribution are zero
    far = replace(geo, n_samples=3)
    img, n_out = ubp_reconstruct(far, np.ones(far.sinogram_shape), return_out_of_window=True)
    assert n_out == far.n_detectors * far.n_pixels
    assert not np.any(img)
