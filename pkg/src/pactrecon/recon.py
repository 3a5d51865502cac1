"""Non-learned reconstructions: universal back-projection, smoothed-TV
gradient descent and L1 proximal gradient (ISTA)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError, UsageError
from .geometry import ImagingGeometry
from .operator import SystemMatrix, apply_adjoint, apply_forward, temporal_derivative


@dataclass(frozen=True)
class TvParams:
    step: float = 2.0
    alpha: float = 0.04
    eps: float = 1e-3
    n_iters: int = 20
    nonneg: bool = False

    def __post_init__(self):
        if not self.step > 0:
            raise UsageError("TV step must be positive")
        if self.alpha < 0:
            raise UsageError("TV alpha must be non-negative")
        if not self.eps > 0:
            raise UsageError("TV eps must be positive")
        if self.n_iters < 1:
            raise UsageError("n_iters must be >= 1")


@dataclass(frozen=True)
class IstaParams:
    step: float = 1.0
    alpha: float = 1e-3
    n_iters: int = 20

    def __post_init__(self):
        if not self.step > 0:
            raise UsageError("ISTA step must be positive")
        if self.alpha < 0:
            raise UsageError("ISTA alpha must be non-negative")
        if self.n_iters < 1:
            raise UsageError("n_iters must be >= 1")


# -- universal back-projection --------------------------------------------------


def ubp_reconstruct(geometry: ImagingGeometry, b: np.ndarray, return_out_of_window: bool = False):
    """Universal back-projection of one sinogram.

    The filtered signal ``2 b - 2 t db/dt`` is read at each pixel's time of
    flight and weighted by ``cos(theta) / |r - r_d|^2``, with ``theta`` measured
    from the detector's inward normal.  Each pixel is divided by its own weight
    sum; samples outside the time window are skipped (and counted).
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != geometry.sinogram_shape:
        raise ShapeError(f"sinogram shape {b.shape} != {geometry.sinogram_shape}")
    t = geometry.time_axis()
    q = 2.0 * b - 2.0 * t * temporal_derivative(b, geometry.sample_period)

    x, y = geometry.pixel_centers()
    cx, cy = geometry.array_center
    num = np.zeros(x.size)
    den = np.zeros(x.size)
    n_out = 0
    for d, (dx0, dy0) in enumerate(geometry.detectors):
        rx, ry = x - dx0, y - dy0
        dist = np.hypot(rx, ry)
        nx_, ny_ = cx - dx0, cy - dy0
        nlen = math.hypot(nx_, ny_)
        if nlen == 0:
            cos_t = np.ones_like(dist)
        else:
            cos_t = (rx * nx_ + ry * ny_) / (np.maximum(dist, 1e-300) * nlen)
        w = cos_t / np.maximum(dist, geometry.pixel_size) ** 2
        tau = dist / geometry.sound_speed
        inside = (tau >= geometry.t_start) & (tau <= geometry.t_end)
        n_out += int(np.count_nonzero(~inside))
        val = np.interp(tau, t, q[d])
        num += np.where(inside, w * val, 0.0)
        den += np.where(inside, w, 0.0)
    img = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    img = img.reshape(geometry.image_shape)
    if return_out_of_window:
        return img, n_out
    return img


# -- smoothed total variation ----------------------------------------------------


def _forward_diff(p):
    dx = np.zeros_like(p)
    dy = np.zeros_like(p)
    dx[..., :, :-1] = p[..., :, 1:] - p[..., :, :-1]
    dy[..., :-1, :] = p[..., 1:, :] - p[..., :-1, :]
    return dx, dy


def smoothed_tv_value(p: np.ndarray, eps: float) -> float:
    """Isotropic TV ``sum sqrt(Dx^2 + Dy^2 + eps^2)`` with Neumann boundaries."""
    dx, dy = _forward_diff(np.asarray(p, dtype=np.float64))
    return float(np.sqrt(dx**2 + dy**2 + eps**2).sum())


def smoothed_tv_gradient(p: np.ndarray, eps: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    dx, dy = _forward_diff(p)
    norm = np.sqrt(dx**2 + dy**2 + eps**2)
    gx = dx / norm
    gy = dy / norm
    # gradient = -div(g) with the adjoint boundary convention of _forward_diff
    grad = -gx - gy
    grad[..., :, 1:] += gx[..., :, :-1]
    grad[..., 1:, :] += gy[..., :-1, :]
    return grad


# -- iterative solvers ----------------------------------------------------------


def _check_finite(p, i):
    if not np.all(np.isfinite(p)):
        raise DivergenceError(f"iterate became non-finite at iteration {i}", index=i)


def tv_gd_reconstruct(
    A: SystemMatrix,
    b: np.ndarray,
    params: TvParams,
    init: np.ndarray | None = None,
    return_trace: bool = False,
):
    """Gradient descent on ``0.5 ||Ap - b||^2 + alpha * TV_eps(p)``.

    Returns the final iterate, or ``(iterate, trace)`` where ``trace`` rows are
    ``(iteration, data_term, reg_term, total)`` starting at iteration 0.
    """
    b = np.asarray(b, dtype=np.float64)
    p = np.zeros(A.image_shape) if init is None else np.array(init, dtype=np.float64)
    trace = []

    def record(i, p, residual):
        data = 0.5 * float(np.vdot(residual, residual))
        reg = params.alpha * smoothed_tv_value(p, params.eps) if params.alpha else 0.0
        trace.append((i, data, reg, data + reg))

    for i in range(1, params.n_iters + 1):
        residual = apply_forward(A, p) - b
        if return_trace and i == 1:
            record(0, p, residual)
        grad = apply_adjoint(A, residual)
        if params.alpha:
            grad = grad + params.alpha * smoothed_tv_gradient(p, params.eps)
        with np.errstate(over="ignore", invalid="ignore"):
            p = p - params.step * grad
        if params.nonneg:
            p = np.maximum(p, 0.0)
        _check_finite(p, i)
        if return_trace:
            record(i, p, apply_forward(A, p) - b)
    if return_trace:
        return p, trace
    return p


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def ista_l1_reconstruct(
    A: SystemMatrix,
    b: np.ndarray,
    params: IstaParams,
    init: np.ndarray | None = None,
    return_trace: bool = False,
):
    """Proximal gradient with an L1 penalty (soft thresholding)."""
    b = np.asarray(b, dtype=np.float64)
    p = np.zeros(A.image_shape) if init is None else np.array(init, dtype=np.float64)
    trace = []

    def record(i, p):
        r = apply_forward(A, p) - b
        data = 0.5 * float(np.vdot(r, r))
        reg = params.alpha * float(np.abs(p).sum())
        trace.append((i, data, reg, data + reg))

    if return_trace:
        record(0, p)
    for i in range(1, params.n_iters + 1):
        grad = apply_adjoint(A, apply_forward(A, p) - b)
        with np.errstate(over="ignore", invalid="ignore"):
            p = soft_threshold(p - params.step * grad, params.step * params.alpha)
        _check_finite(p, i)
        if return_trace:
            record(i, p)
    if return_trace:
        return p, trace
    return p


def operator_norm_estimate(A, n_power_iters: int = 100, seed: int = 0) -> float:
    """Spectral norm of ``A`` by power iteration on ``A^T A``.

    ``A`` may be a :class:`SystemMatrix` or any scipy sparse / dense matrix.
    """
    if n_power_iters < 1:
        raise UsageError("n_power_iters must be >= 1")
    M = A.csr if isinstance(A, SystemMatrix) else A
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(M.shape[1])
    x /= np.linalg.norm(x)
    rayleigh = 0.0
    for _ in range(n_power_iters):
        y = M.T @ (M @ x)
        rayleigh = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
    return math.sqrt(max(rayleigh, 0.0))


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "data_term", "reg_term", "total"])
        for row in trace:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
