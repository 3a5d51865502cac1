"""Imaging geometry: pixel grid, detector arc, sound speed and time sampling.

All quantities are SI (metres, seconds, m/s).  Pixel ``(i, j)`` (row, column)
has its centre at ``grid_origin + (j * pixel_size, i * pixel_size)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class ImagingGeometry:
    grid_nx: int
    grid_ny: int
    pixel_size: float
    grid_origin: tuple[float, float]
    detectors: tuple[tuple[float, float], ...]
    sample_period: float
    n_samples: int
    sound_speed: float = 1500.0
    t_start: float = 0.0
    # global multiplier on operator entries; 1.0 gives the plain physical model
    amplitude_scale: float = 1.0
    # centre of the detector arc; inward normals point here (defaults to grid centre)
    array_center: tuple[float, float] | None = None
    _fingerprint: str = field(default="", init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "grid_origin", tuple(float(v) for v in self.grid_origin))
        object.__setattr__(
            self, "detectors", tuple((float(x), float(y)) for x, y in self.detectors)
        )
        if self.array_center is None:
            center = (
                self.grid_origin[0] + (self.grid_nx - 1) / 2 * self.pixel_size,
                self.grid_origin[1] + (self.grid_ny - 1) / 2 * self.pixel_size,
            )
        else:
            center = tuple(float(v) for v in self.array_center)
        object.__setattr__(self, "array_center", center)
        if self.grid_nx <= 0 or self.grid_ny <= 0:
            raise UsageError("grid dimensions must be positive")
        if not self.pixel_size > 0:
            raise UsageError("pixel_size must be positive")
        if not self.sound_speed > 0:
            raise UsageError("sound_speed must be positive")
        if not self.sample_period > 0:
            raise UsageError("sample_period must be positive")
        if self.n_samples < 2:
            raise UsageError("n_samples must be >= 2")
        if not self.detectors:
            raise UsageError("geometry needs at least one detector")
        if not (math.isfinite(self.amplitude_scale) and self.amplitude_scale > 0):
            raise UsageError("amplitude_scale must be positive and finite")

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    @property
    def n_pixels(self) -> int:
        return self.grid_nx * self.grid_ny

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.grid_ny, self.grid_nx)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.n_detectors, self.n_samples)

    @property
    def t_end(self) -> float:
        return self.t_start + (self.n_samples - 1) * self.sample_period

    def detector_array(self) -> np.ndarray:
        return np.asarray(self.detectors, dtype=np.float64)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return flattened (x, y) pixel-centre coordinates in row-major order."""
        jj, ii = np.meshgrid(np.arange(self.grid_nx), np.arange(self.grid_ny))
        x = self.grid_origin[0] + jj.ravel() * self.pixel_size
        y = self.grid_origin[1] + ii.ravel() * self.pixel_size
        return x.astype(np.float64), y.astype(np.float64)

    def time_axis(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_samples) * self.sample_period

    def distances(self) -> np.ndarray:
        """Pixel-detector distances, shape (n_detectors, n_pixels)."""
        x, y = self.pixel_centers()
        det = self.detector_array()
        return np.hypot(x[None, :] - det[:, 0:1], y[None, :] - det[:, 1:2])

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "grid_nx": self.grid_nx,
            "grid_ny": self.grid_ny,
            "pixel_size_m": self.pixel_size,
            "grid_origin_m": list(self.grid_origin),
            "detectors_m": [list(d) for d in self.detectors],
            "sound_speed_m_per_s": self.sound_speed,
            "sample_period_s": self.sample_period,
            "n_samples": self.n_samples,
            "t_start_s": self.t_start,
            "amplitude_scale": self.amplitude_scale,
            "array_center_m": list(self.array_center),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImagingGeometry":
        try:
            return cls(
                grid_nx=int(d["grid_nx"]),
                grid_ny=int(d["grid_ny"]),
                pixel_size=float(d["pixel_size_m"]),
                grid_origin=tuple(d["grid_origin_m"]),
                detectors=tuple(tuple(p) for p in d["detectors_m"]),
                sound_speed=float(d.get("sound_speed_m_per_s", 1500.0)),
                sample_period=float(d["sample_period_s"]),
                n_samples=int(d["n_samples"]),
                t_start=float(d.get("t_start_s", 0.0)),
                amplitude_scale=float(d.get("amplitude_scale", 1.0)),
                array_center=d.get("array_center_m"),
            )
        except KeyError as exc:
            raise UsageError(f"geometry JSON missing key {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ImagingGeometry":
        return cls.from_dict(json.loads(text))

    @property
    def fingerprint(self) -> str:
        if not self._fingerprint:
            # repr of floats is exact, so the hash pins every bit of the geometry
            digest = hashlib.sha256(self.to_json().encode()).hexdigest()[:16]
            object.__setattr__(self, "_fingerprint", digest)
        return self._fingerprint

    def with_amplitude_scale(self, scale: float) -> "ImagingGeometry":
        return replace(self, amplitude_scale=float(scale))

    def refined(self, factor: int) -> "ImagingGeometry":
        """Same field of view on a ``factor``-times finer pixel grid and time axis."""
        if factor < 1 or int(factor) != factor:
            raise UsageError("refinement factor must be a positive integer")
        f = int(factor)
        px = self.pixel_size / f
        origin = (
            self.grid_origin[0] - self.pixel_size / 2 + px / 2,
            self.grid_origin[1] - self.pixel_size / 2 + px / 2,
        )
        return replace(
            self,
            grid_nx=self.grid_nx * f,
            grid_ny=self.grid_ny * f,
            pixel_size=px,
            grid_origin=origin,
            sample_period=self.sample_period / f,
            n_samples=(self.n_samples - 1) * f + 1,
        )


def arc_angles(n_detectors: int, angular_span: float, start_angle: float) -> np.ndarray:
    """Detector angles in degrees: endpoint-inclusive for partial arcs, wrap-exclusive for rings."""
    if n_detectors < 1:
        raise UsageError("need at least one detector")
    if not 0 < angular_span <= 360:
        raise UsageError("angular_span must lie in (0, 360]")
    k = np.arange(n_detectors, dtype=np.float64)
    if angular_span >= 360:
        return start_angle + k * angular_span / n_detectors
    if n_detectors == 1:
        return np.array([float(start_angle)])
    return start_angle + k * angular_span / (n_detectors - 1)


def make_half_ring_geometry(
    n_detectors: int,
    radius: float,
    center: tuple[float, float] = (0.0, 0.0),
    angular_span: float = 180.0,
    start_angle: float = 0.0,
    grid_spec: dict | None = None,
    acquisition_spec: dict | None = None,
) -> ImagingGeometry:
    """Place ``n_detectors`` on a circular arc around ``center``.

    Parameters
    ----------
    grid_spec : dict
        ``nx``, ``ny``, ``pixel_size`` and optionally ``origin``; by default the
        grid is centred on ``center``.
    acquisition_spec : dict
        ``sample_period`` (default: half a pixel of travel), ``sound_speed``,
        ``t_start`` and ``n_samples``.  When ``n_samples`` is omitted it is set
        to the smallest count that covers every pixel-detector pair.
    """
    if not radius > 0:
        raise UsageError("radius must be positive")
    theta = np.deg2rad(arc_angles(n_detectors, angular_span, start_angle))
    cx, cy = float(center[0]), float(center[1])
    detectors = tuple(
        (cx + radius * math.cos(t), cy + radius * math.sin(t)) for t in theta
    )

    grid_spec = dict(grid_spec or {})
    nx = int(grid_spec.get("nx", 64))
    ny = int(grid_spec.get("ny", nx))
    pixel_size = float(grid_spec.get("pixel_size", 26.95e-3 / nx))
    origin = grid_spec.get("origin")
    if origin is None:
        origin = (cx - (nx - 1) / 2 * pixel_size, cy - (ny - 1) / 2 * pixel_size)

    acq = dict(acquisition_spec or {})
    sound_speed = float(acq.get("sound_speed", 1500.0))
    dt = float(acq.get("sample_period", pixel_size / (2 * sound_speed)))
    t_start = float(acq.get("t_start", 0.0))
    n_samples = acq.get("n_samples")
    if n_samples is None:
        probe = ImagingGeometry(
            grid_nx=nx, grid_ny=ny, pixel_size=pixel_size, grid_origin=origin,
            detectors=detectors, sound_speed=sound_speed, sample_period=dt,
            n_samples=2, t_start=t_start,
        )
        max_tof, _ = coverage_check(probe)
        n_samples = max(2, math.ceil((max_tof - t_start) / dt) + 1)
    return ImagingGeometry(
        grid_nx=nx,
        grid_ny=ny,
        pixel_size=pixel_size,
        grid_origin=origin,
        detectors=detectors,
        sound_speed=sound_speed,
        sample_period=dt,
        n_samples=int(n_samples),
        t_start=t_start,
        amplitude_scale=float(acq.get("amplitude_scale", 1.0)),
        array_center=(cx, cy),
    )


def coverage_check(geometry: ImagingGeometry) -> tuple[float, bool]:
    """Return ``(max_tof, covered)`` over all pixel-detector pairs."""
    max_tof = float(geometry.distances().max()) / geometry.sound_speed
    return max_tof, max_tof <= geometry.t_end


def worst_pair(geometry: ImagingGeometry) -> tuple[int, int, float]:
    """(pixel index, detector index, time of flight) of the latest arrival."""
    dist = geometry.distances()
    d, p = np.unravel_index(int(np.argmax(dist)), dist.shape)
    return int(p), int(d), float(dist[d, p]) / geometry.sound_speed


def desk_geometry(
    n: int = 64,
    n_detectors: int = 32,
    angular_span: float = 180.0,
    start_angle: float = 0.0,
    radius: float = 19e-3,
    roi: float = 26.95e-3,
) -> ImagingGeometry:
    """Scaled-down version of the simulated half-ring set-up (19 mm radius, 26.95 mm ROI)."""
    return make_half_ring_geometry(
        n_detectors,
        radius,
        (0.0, 0.0),
        angular_span,
        start_angle,
        grid_spec={"nx": n, "ny": n, "pixel_size": roi / n},
    )
