import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pactrecon.errors import UsageError
from pactrecon.geometry import (
    ImagingGeometry,
    arc_angles,
    coverage_check,
    desk_geometry,
    make_half_ring_geometry,
)


def test_half_ring_64_detectors_on_upper_semicircle():
    geo = make_half_ring_geometry(64, 0.019)
    det = geo.detector_array()
    assert det.shape == (64, 2)
    assert np.all(det[:, 1] >= -1e-15)
    ang = np.degrees(np.arctan2(det[:, 1], det[:, 0]))
    assert np.allclose(np.diff(ang), 180 / 63)
    assert ang[0] == pytest.approx(0) and ang[-1] == pytest.approx(180)


def test_single_detector():
    geo = make_half_ring_geometry(1, 0.019, (0.001, -0.002), 180, 90)
    (x, y), = geo.detectors
    assert x == pytest.approx(0.001, abs=1e-15)
    assert y == pytest.approx(-0.002 + 0.019, abs=1e-15)


def test_full_ring_four_detectors_pairwise_distances():
    r = 0.01
    geo = make_half_ring_geometry(4, r, (0, 0), 360, 0)
    det = geo.detector_array()
    expected = [(math.cos(math.radians(a)) * r, math.sin(math.radians(a)) * r) for a in (0, 90, 180, 270)]
    assert np.allclose(det, expected, atol=1e-15)
    d = np.hypot(*(det[:, None, :] - det[None, :, :]).transpose(2, 0, 1))
    assert d[0, 1] == pytest.approx(r * math.sqrt(2), rel=1e-12)
    assert d[0, 2] == pytest.approx(2 * r, rel=1e-12)


@pytest.mark.parametrize("n,r", [(0, 0.01), (4, 0.0), (4, -1.0)])
def test_invalid_arguments(n, r):
    with pytest.raises(UsageError):
        make_half_ring_geometry(n, r)


def test_invalid_span():
    with pytest.raises(UsageError):
        arc_angles(4, 0, 0)
    with pytest.raises(UsageError):
        arc_angles(4, 361, 0)


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(1, 80),
    r=st.floats(1e-3, 1.0),
    cx=st.floats(-0.1, 0.1),
    cy=st.floats(-0.1, 0.1),
    span=st.floats(1.0, 360.0),
    start=st.floats(-360.0, 360.0),
)
def test_detectors_lie_on_circle(n, r, cx, cy, span, start):
    geo = make_half_ring_geometry(n, r, (cx, cy), span, start, grid_spec={"nx": 8})
    det = geo.detector_array()
    dist = np.hypot(det[:, 0] - cx, det[:, 1] - cy)
    assert np.all(np.abs(dist - r) <= 1e-12 * r + 1e-15)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 40), span=st.floats(1.0, 359.0), start=st.floats(-180, 180))
def test_reflection_reverses_detector_list(n, span, start):
    # mirror across the arc's symmetry axis (at start + span / 2): start' = start, order reversed
    a = arc_angles(n, span, start)
    axis = start + span / 2
    mirrored = 2 * axis - a
    assert np.allclose(np.sort(mirrored), np.sort(a), atol=1e-9)
    assert np.allclose(mirrored[::-1], a, atol=1e-9)


def test_coverage_zero_distance():
    geo = ImagingGeometry(1, 1, 1e-4, (0.0, 0.0), ((0.0, 0.0),), 1e-7, 2)
    tof, ok = coverage_check(geo)
    assert tof == 0.0 and ok


def test_coverage_violation():
    geo = ImagingGeometry(2, 1, 1e-3, (0.0, 0.0), ((0.05, 0.0),), 1e-7, 3)
    tof, ok = coverage_check(geo)
    assert not ok
    assert tof == pytest.approx(0.05 / 1500)


def test_desk_geometry_covered_by_brute_force():
    geo = desk_geometry()
    brute = 0.0
    for dx, dy in geo.detectors:
        for i in range(geo.grid_ny):
            for j in range(geo.grid_nx):
                x = geo.grid_origin[0] + j * geo.pixel_size
                y = geo.grid_origin[1] + i * geo.pixel_size
                brute = max(brute, math.hypot(x - dx, y - dy) / geo.sound_speed)
    tof, ok = coverage_check(geo)
    assert tof == pytest.approx(brute, rel=1e-14)
    assert ok
    assert geo.n_samples == math.ceil(brute / geo.sample_period) + 1


@settings(max_examples=40, deadline=None)
@given(ns=st.integers(2, 200))
def test_coverage_monotone(ns):
    base = desk_geometry(n=8, n_detectors=3)
    from dataclasses import replace

    ok_n = coverage_check(replace(base, n_samples=ns))[1]
    ok_n1 = coverage_check(replace(base, n_samples=ns + 1))[1]
    assert (not ok_n) or ok_n1


def test_pixel_centres_follow_origin_convention():
    geo = desk_geometry(n=8, n_detectors=2)
    x, y = geo.pixel_centers()
    # pixel (i, j) -> origin + (j, i) * pixel_size, row-major flattening
    assert x[3] == pytest.approx(geo.grid_origin[0] + 3 * geo.pixel_size)
    assert y[3] == pytest.approx(geo.grid_origin[1])
    assert y[8 * 2 + 1] == pytest.approx(geo.grid_origin[1] + 2 * geo.pixel_size)
    assert np.mean(x) == pytest.approx(0.0, abs=1e-15)


def test_json_round_trip_and_fingerprint():
    geo = desk_geometry(n=16, n_detectors=5).with_amplitude_scale(3.5)
    back = ImagingGeometry.from_json(geo.to_json())
    assert back == geo
    assert back.fingerprint == geo.fingerprint
    assert desk_geometry(n=16, n_detectors=6).fingerprint != geo.fingerprint
    d = geo.to_dict()
    assert {"pixel_size_m", "sample_period_s", "detectors_m", "sound_speed_m_per_s"} <= set(d)


def test_refined_preserves_field_of_view():
    geo = desk_geometry(n=8, n_detectors=4)
    fine = geo.refined(2)
    assert fine.grid_nx == 16 and fine.pixel_size == pytest.approx(geo.pixel_size / 2)
    x, _ = geo.pixel_centers()
    xf, _ = fine.pixel_centers()
    assert xf.min() - fine.pixel_size / 2 == pytest.approx(x.min() - geo.pixel_size / 2)
    assert fine.t_end == pytest.approx(geo.t_end)
    assert fine.amplitude_scale == geo.amplitude_scale
    assert fine.array_center == geo.array_center


def test_invalid_geometry_fields():
    with pytest.raises(UsageError):
        ImagingGeometry(8, 8, -1.0, (0, 0), ((0, 0),), 1e-7, 10)
    with pytest.raises(UsageError):
        ImagingGeometry(8, 8, 1e-4, (0, 0), (), 1e-7, 10)
    with pytest.raises(UsageError):
        ImagingGeometry(8, 8, 1e-4, (0, 0), ((0, 0),), 1e-7, 1)
