import math

import numpy as np
import pytest

from pactrecon.geometry import ImagingGeometry, make_half_ring_geometry


def dense_oracle(geo: ImagingGeometry) -> np.ndarray:
    """Direct summation over every (detector, sample, pixel) triple.

    Each entry is the hat function max(0, 1 - |tau/dt - k|) times the
    amplitude factor, written without reference to the sparse builder.
    """
    n_rows = geo.n_detectors * geo.n_samples
    M = np.zeros((n_rows, geo.grid_nx * geo.grid_ny))
    for d, (dx, dy) in enumerate(geo.detectors):
        for i in range(geo.grid_ny):
            for j in range(geo.grid_nx):
                x = geo.grid_origin[0] + j * geo.pixel_size
                y = geo.grid_origin[1] + i * geo.pixel_size
                r = math.hypot(x - dx, y - dy)
                u = (r / geo.sound_speed - geo.t_start) / geo.sample_period
                amp = geo.amplitude_scale * geo.pixel_size**2 / max(r, geo.pixel_size)
                for k in range(geo.n_samples):
                    w = 1.0 - abs(u - k)
                    if w > 1e-9:
                        M[d * geo.n_samples + k, i * geo.grid_nx + j] += w * amp
    return M


def small_geometry(n=8, n_det=6, span=180.0, radius=None, scale=1.0) -> ImagingGeometry:
    roi = 26.95e-3 * n / 64
    radius = radius if radius is not None else 19e-3 * n / 64
    geo = make_half_ring_geometry(
        n_det, radius, (0.0, 0.0), span, 0.0, grid_spec={"nx": n, "ny": n, "pixel_size": roi / n}
    )
    return geo.with_amplitude_scale(scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def geo16():
    from pactrecon.operator import calibrate_amplitude

    return calibrate_amplitude(small_geometry(16, 12))


@pytest.fixture(scope="session")
def A16(geo16):
    from pactrecon.operator import build_system_matrix

    return build_system_matrix(geo16)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
