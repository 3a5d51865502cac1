import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_oracle, small_geometry
from pactrecon.errors import (
    CoverageError,
    FingerprintError,
    MagicError,
    ShapeError,
    TruncationError,
    UsageError,
    VersionError,
)
from pactrecon.geometry import ImagingGeometry, desk_geometry
from pactrecon.operator import (
    apply_adjoint,
    apply_forward,
    build_system_matrix,
    calibrate_amplitude,
    data_consistency_gradient,
    data_term,
    load_system_matrix,
    save_system_matrix,
    temporal_derivative,
)
from pactrecon.recon import operator_norm_estimate


def _line_geometry(distance_samples, dt=1e-7, c=1500.0):
    """One detector on the x axis, one pixel at the origin, ``distance_samples * c * dt`` away."""
    r = distance_samples * c * dt
    return ImagingGeometry(1, 1, 1e-5, (0.0, 0.0), ((r, 0.0),), dt, int(distance_samples) + 3, c)


def test_on_grid_time_of_flight_single_entry():
    geo = _line_geometry(40)
    A = build_system_matrix(geo)
    M = A.toarray()
    assert np.count_nonzero(M) == 1
    assert M[40, 0] > 0 and M[41, 0] == 0


def test_half_sample_time_of_flight_splits_evenly():
    geo = _line_geometry(40.5)
    M = build_system_matrix(geo).toarray()
    assert np.count_nonzero(M) == 2
    amp = geo.pixel_size**2 / (40.5 * 1500 * 1e-7)
    assert M[40, 0] == pytest.approx(0.5 * amp, rel=1e-12)
    assert M[41, 0] == pytest.approx(0.5 * amp, rel=1e-12)


def test_desk_matrix_shape():
    geo = desk_geometry()
    A = build_system_matrix(geo)
    assert A.n_rows == 32 * geo.n_samples
    assert A.n_cols == 4096
    assert A.csr.nnz <= 2 * 32 * 4096
    assert np.all(A.values >= 0) and np.all(np.isfinite(A.values))
    assert A.row_offsets.dtype == np.int64 and A.col_indices.dtype == np.int64


def test_at_most_two_adjacent_rows_per_pair():
    geo = small_geometry(12, 5)
    A = build_system_matrix(geo)
    M = A.toarray().reshape(geo.n_detectors, geo.n_samples, -1)
    for d in range(geo.n_detectors):
        for j in range(M.shape[2]):
            nz = np.nonzero(M[d, :, j])[0]
            assert 1 <= len(nz) <= 2
            if len(nz) == 2:
                assert nz[1] == nz[0] + 1


def test_uncovered_geometry_raises_with_worst_pair():
    geo = small_geometry(8, 4)
    from dataclasses import replace

    bad = replace(geo, n_samples=5)
    with pytest.raises(CoverageError) as info:
        build_system_matrix(bad)
    assert info.value.pixel is not None and info.value.detector is not None


@pytest.mark.parametrize("n,n_det,span", [(6, 4, 180.0), (10, 7, 360.0), (16, 8, 180.0), (16, 5, 90.0)])
def test_dense_oracle_equivalence(n, n_det, span, rng):
    geo = calibrate_amplitude(small_geometry(n, n_det, span))
    A = build_system_matrix(geo)
    M = dense_oracle(geo)
    assert np.max(np.abs(A.toarray() - M)) <= 1e-12
    for _ in range(3):
        p = rng.standard_normal(geo.image_shape)
        q = rng.standard_normal(geo.sinogram_shape)
        assert np.max(np.abs(apply_forward(A, p).ravel() - M @ p.ravel())) <= 1e-12
        assert np.max(np.abs(apply_adjoint(A, q).ravel() - M.T @ q.ravel())) <= 1e-12


def test_single_pixel_vs_oracle():
    geo = small_geometry(8, 3)
    A = build_system_matrix(geo)
    M = dense_oracle(geo)
    p = np.zeros(geo.image_shape)
    p[3, 5] = 1.0
    assert np.allclose(apply_forward(A, p).ravel(), M[:, 3 * 8 + 5], rtol=0, atol=1e-20)


def test_adjoint_identity(A16, rng):
    for _ in range(10):
        p = rng.standard_normal(A16.image_shape)
        q = rng.standard_normal(A16.sinogram_shape)
        Ap = apply_forward(A16, p)
        lhs = np.vdot(Ap, q)
        rhs = np.vdot(p, apply_adjoint(A16, q))
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(Ap) * np.linalg.norm(q)


def test_unit_sinogram_returns_row(A16):
    q = np.zeros(A16.sinogram_shape)
    d, k = 3, int(np.argmax(np.diff(A16.row_offsets)[3 * A16.n_samples : 4 * A16.n_samples]))
    q[d, k] = 1.0
    row = A16.csr.getrow(d * A16.n_samples + k).toarray().ravel()
    assert np.any(row)
    assert np.array_equal(apply_adjoint(A16, q).ravel(), row)


def test_linearity_and_zero(A16, rng):
    assert not np.any(apply_forward(A16, np.zeros(A16.image_shape)))
    assert not np.any(apply_adjoint(A16, np.zeros(A16.sinogram_shape)))
    p1, p2 = rng.standard_normal((2,) + A16.image_shape)
    lhs = apply_forward(A16, p1 + p2)
    rhs = apply_forward(A16, p1) + apply_forward(A16, p2)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(lhs)


def test_batched_application_matches_loop(A16, rng):
    p = rng.standard_normal((3,) + A16.image_shape)
    out = apply_forward(A16, p)
    assert out.shape == (3,) + A16.sinogram_shape
    for i in range(3):
        assert np.array_equal(out[i], apply_forward(A16, p[i]))


def test_shape_errors(A16):
    with pytest.raises(ShapeError):
        apply_forward(A16, np.zeros((5, 5)))
    with pytest.raises(ShapeError):
        apply_adjoint(A16, np.zeros((2, 2)))


def test_gradient_definition_and_consistent_data(A16, rng):
    p = rng.standard_normal(A16.image_shape)
    b = rng.standard_normal(A16.sinogram_shape)
    g = data_consistency_gradient(A16, p, b)
    assert np.array_equal(g, apply_adjoint(A16, apply_forward(A16, p) - b))
    assert np.max(np.abs(data_consistency_gradient(A16, p, apply_forward(A16, p)))) <= 1e-10
    p0 = np.zeros(A16.image_shape)
    assert np.allclose(data_consistency_gradient(A16, p0, b), -apply_adjoint(A16, b), rtol=0, atol=1e-14)


def test_gradient_finite_differences(A16):
    for seed in range(50):
        r = np.random.default_rng(seed)
        p = r.standard_normal(A16.image_shape)
        b = r.standard_normal(A16.sinogram_shape)
        v = r.standard_normal(A16.image_shape)
        h = 1e-5
        fd = (data_term(A16, p + h * v, b) - data_term(A16, p - h * v, b)) / (2 * h)
        an = np.vdot(data_consistency_gradient(A16, p, b), v)
        assert abs(fd - an) <= 1e-4 * max(abs(an), 1e-12)


def test_temporal_derivative():
    dt = 1e-3
    assert not np.any(temporal_derivative(np.full((2, 10), 3.0), dt))
    t = np.arange(20) * dt
    d = temporal_derivative(5 * t + 1, dt)
    assert np.allclose(d, 5.0, rtol=1e-12)
    f = 0.01 / dt
    t = np.arange(400) * dt
    d = temporal_derivative(np.sin(2 * np.pi * f * t), dt)
    exact = 2 * np.pi * f * np.cos(2 * np.pi * f * t)
    # central differences: error (2 pi f)^3 dt^2 / 6 relative to the amplitude
    err = np.max(np.abs(d[1:-1] - exact[1:-1])) / (2 * np.pi * f)
    assert err <= (2 * np.pi * 0.01) ** 2 / 6 * 1.01
    with pytest.raises(UsageError):
        temporal_derivative(np.zeros(2), dt)


def test_matrix_cache_round_trip(tmp_path, geo16, A16):
    path = tmp_path / "a.pasm"
    save_system_matrix(A16, path)
    B = load_system_matrix(path, geo16)
    assert np.array_equal(B.row_offsets, A16.row_offsets)
    assert np.array_equal(B.col_indices, A16.col_indices)
    assert np.array_equal(B.values, A16.values)
    assert B.geometry_fingerprint == A16.geometry_fingerprint


def test_matrix_cache_errors(tmp_path, geo16, A16):
    path = tmp_path / "a.pasm"
    save_system_matrix(A16, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MagicError):
        load_system_matrix(bad, geo16)
    bad.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionError):
        load_system_matrix(bad, geo16)
    bad.write_bytes(raw[:-10])
    with pytest.raises(TruncationError):
        load_system_matrix(bad, geo16)
    with pytest.raises(FingerprintError):
        load_system_matrix(path, geo16.with_amplitude_scale(geo16.amplitude_scale * 2))


def test_calibrated_operator_has_unit_norm():
    geo = calibrate_amplitude(small_geometry(12, 6))
    A = build_system_matrix(geo)
    assert np.linalg.norm(A.toarray(), 2) == pytest.approx(1.0, rel=1e-6)
    raw = build_system_matrix(geo.with_amplitude_scale(1.0))
    assert np.allclose(A.values, raw.values * geo.amplitude_scale, rtol=1e-15)


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(0.1, 10.0))
def test_amplitude_scale_is_linear(scale):
    geo = small_geometry(8, 3)
    a = build_system_matrix(geo).values
    b = build_system_matrix(geo.with_amplitude_scale(scale)).values
    assert np.allclose(b, a * scale, rtol=1e-14)


def test_operator_norm_estimate_vs_svd(A16):
    exact = np.linalg.norm(A16.toarray(), 2)
    assert operator_norm_estimate(A16, 300) == pytest.approx(exact, rel=1e-6)
    assert math.isclose(operator_norm_estimate(np.zeros((3, 4))), 0.0)
