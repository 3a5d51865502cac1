"""Sparse time-of-flight (spherical-mean) forward operator and its adjoint.

Images are ``(ny, nx)`` arrays, sinograms ``(n_detectors, n_samples)``.  Both
may carry leading batch dimensions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import (
    CoverageError,
    FingerprintError,
    MagicError,
    ShapeError,
    TruncationError,
    UsageError,
    VersionError,
)
from .geometry import ImagingGeometry, coverage_check, worst_pair

PASM_MAGIC = b"PASM"
PASM_VERSION = 1


@dataclass(frozen=True)
class SystemMatrix:
    """Row-compressed forward matrix with row index ``d * n_samples + k``."""

    csr: sp.csr_matrix
    n_detectors: int
    n_samples: int
    image_shape: tuple[int, int]
    geometry_fingerprint: str

    @property
    def n_rows(self) -> int:
        return self.csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self.csr.shape[1]

    @property
    def row_offsets(self) -> np.ndarray:
        return self.csr.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self.csr.indices

    @property
    def values(self) -> np.ndarray:
        return self.csr.data

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.n_detectors, self.n_samples)

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()


def build_system_matrix(geometry: ImagingGeometry) -> SystemMatrix:
    """Discretise the spherical-mean forward model for ``geometry``.

    Each pixel-detector pair deposits onto the two time samples bracketing its
    time of flight with linear-interpolation weights, scaled by
    ``pixel_size**2 / max(distance, pixel_size)`` and ``geometry.amplitude_scale``.
    """
    max_tof, covered = coverage_check(geometry)
    dist = geometry.distances()
    tof = dist / geometry.sound_speed
    if not covered or tof.min() < geometry.t_start:
        if covered:
            d, p = np.unravel_index(int(np.argmin(tof)), tof.shape)
            t_bad = float(tof[d, p])
        else:
            p, d, t_bad = worst_pair(geometry)
        raise CoverageError(
            f"time window [{geometry.t_start:.6g}, {geometry.t_end:.6g}] s does not "
            f"cover pixel {p} / detector {d} (time of flight {t_bad:.6g} s)",
            pixel=int(p),
            detector=int(d),
        )

    ns = geometry.n_samples
    n_det, n_pix = dist.shape
    u = (tof - geometry.t_start) / geometry.sample_period
    # snap times that land on a sample to within rounding
    nearest = np.rint(u)
    on_grid = np.abs(u - nearest) <= 1e-9 * np.maximum(1.0, np.abs(u))
    u = np.where(on_grid, nearest, u)
    k = np.floor(u).astype(np.int64)
    k = np.minimum(k, ns - 1)
    frac = u - k
    amp = (
        geometry.amplitude_scale
        * geometry.pixel_size**2
        / np.maximum(dist, geometry.pixel_size)
    )

    det_idx = np.repeat(np.arange(n_det, dtype=np.int64)[:, None], n_pix, axis=1)
    cols = np.broadcast_to(np.arange(n_pix, dtype=np.int64), (n_det, n_pix))
    rows_lo = det_idx * ns + k
    vals_lo = (1.0 - frac) * amp
    second = frac > 0
    rows = np.concatenate([rows_lo.ravel(), (rows_lo + 1)[second]])
    cc = np.concatenate([cols.ravel(), cols[second]])
    vals = np.concatenate([vals_lo.ravel(), (frac * amp)[second]])

    csr = sp.coo_matrix((vals, (rows, cc)), shape=(n_det * ns, n_pix)).tocsr()
    csr.sort_indices()
    csr.indptr = csr.indptr.astype(np.int64)
    csr.indices = csr.indices.astype(np.int64)
    return SystemMatrix(
        csr=csr,
        n_detectors=n_det,
        n_samples=ns,
        image_shape=geometry.image_shape,
        geometry_fingerprint=geometry.fingerprint,
    )


def _flatten(x: np.ndarray, trailing: tuple[int, int], what: str) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2:] != tuple(trailing):
        raise ShapeError(f"{what} shape {x.shape} does not end in {tuple(trailing)}")
    lead = x.shape[:-2]
    return x.reshape(-1, trailing[0] * trailing[1]), lead


def apply_forward(A: SystemMatrix, p: np.ndarray) -> np.ndarray:
    """Sinogram ``A p`` for an image (or a batch of images)."""
    flat, lead = _flatten(p, A.image_shape, "image")
    out = (A.csr @ flat.T).T
    return np.ascontiguousarray(out).reshape(lead + A.sinogram_shape)


def apply_adjoint(A: SystemMatrix, b: np.ndarray) -> np.ndarray:
    """Back-projection ``A^T b`` for a sinogram (or a batch of sinograms)."""
    flat, lead = _flatten(b, A.sinogram_shape, "sinogram")
    # transpose of CSR is CSC; its matvec accumulates in fixed index order
    out = (A.csr.T @ flat.T).T
    return np.ascontiguousarray(out).reshape(lead + A.image_shape)


def data_consistency_gradient(A: SystemMatrix, p: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient ``A^T (A p - b)`` of ``0.5 * ||A p - b||^2``."""
    b = np.asarray(b, dtype=np.float64)
    residual = apply_forward(A, p)
    if residual.shape != b.shape:
        raise ShapeError(f"sinogram shape {b.shape} != {residual.shape}")
    return apply_adjoint(A, residual - b)


def data_term(A: SystemMatrix, p: np.ndarray, b: np.ndarray) -> float:
    r = apply_forward(A, p) - b
    return 0.5 * float(np.vdot(r, r))


def temporal_derivative(b: np.ndarray, dt: float) -> np.ndarray:
    """Time derivative along the last axis.

    Central differences inside, first-order one-sided differences at both ends.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] < 3:
        raise UsageError("temporal_derivative needs at least 3 samples")
    if not dt > 0:
        raise UsageError("dt must be positive")
    return np.gradient(b, dt, axis=-1, edge_order=1)


# -- cache file ---------------------------------------------------------------


def save_system_matrix(A: SystemMatrix, path) -> None:
    fp = A.geometry_fingerprint.encode("ascii")
    ny, nx = A.image_shape
    with open(path, "wb") as fh:
        fh.write(PASM_MAGIC)
        fh.write(struct.pack("<I", PASM_VERSION))
        fh.write(struct.pack("<I", len(fp)))
        fh.write(fp)
        fh.write(struct.pack("<6q", A.n_detectors, A.n_samples, ny, nx, A.n_cols, A.csr.nnz))
        fh.write(A.row_offsets.astype("<i8").tobytes())
        fh.write(A.col_indices.astype("<i8").tobytes())
        fh.write(A.values.astype("<f8").tobytes())


def load_system_matrix(path, geometry: ImagingGeometry) -> SystemMatrix:
    """Load a cached matrix, refusing it unless it was built for ``geometry``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PASM_MAGIC:
        raise MagicError(f"{path}: not a PASM matrix file")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != PASM_VERSION:
            raise VersionError(f"{path}: unsupported PASM version {version}")
        (fp_len,) = struct.unpack_from("<I", raw, 8)
        fp = raw[12 : 12 + fp_len].decode("ascii")
        off = 12 + fp_len
        n_det, ns, ny, nx, n_cols, nnz = struct.unpack_from("<6q", raw, off)
    except struct.error:
        raise TruncationError(f"{path}: truncated header") from None
    off += 48
    n_rows = n_det * ns
    need = off + 8 * (n_rows + 1) + 16 * nnz
    if len(raw) < need:
        raise TruncationError(f"{path}: expected {need} bytes, found {len(raw)}")
    if fp != geometry.fingerprint:
        raise FingerprintError(
            f"{path}: matrix fingerprint {fp} does not match geometry {geometry.fingerprint}"
        )
    indptr = np.frombuffer(raw, "<i8", n_rows + 1, off).astype(np.int64)
    off += 8 * (n_rows + 1)
    indices = np.frombuffer(raw, "<i8", nnz, off).astype(np.int64)
    off += 8 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off).astype(np.float64)
    csr = sp.csr_matrix((data, indices, indptr), shape=(n_rows, n_cols))
    return SystemMatrix(csr, n_det, ns, (ny, nx), fp)


def calibrate_amplitude(geometry: ImagingGeometry, n_power_iters: int = 100, seed: int = 0) -> ImagingGeometry:
    """Return ``geometry`` with ``amplitude_scale`` set so that ``||A||_2 == 1``."""
    from .recon import operator_norm_estimate

    raw = build_system_matrix(geometry.with_amplitude_scale(1.0))
    norm = operator_norm_estimate(raw, n_power_iters, seed)
    if norm <= 0:
        raise UsageError("cannot calibrate an all-zero operator")
    return geometry.with_amplitude_scale(1.0 / norm)
