"""Phantoms, sinogram synthesis and the PADS dataset container."""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import map_coordinates

from . import operator as op
from .errors import (
    FingerprintError,
    FormatError,
    MagicError,
    ShapeError,
    TruncationError,
    UsageError,
    VersionError,
)
from .geometry import ImagingGeometry

PADS_MAGIC = b"PADS"
PADS_VERSION = 1


# -- procedural vessels -------------------------------------------------------------


@dataclass(frozen=True)
class VesselPhantomConfig:
    shape: tuple[int, int] = (64, 64)
    n_trees: int = 3
    depth: int = 3
    width_range: tuple[float, float] = (1.2, 2.8)
    curvature_range: tuple[float, float] = (-0.25, 0.25)
    intensity_range: tuple[float, float] = (0.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.intensity_range
        if not 0 <= lo <= hi <= 1:
            raise UsageError("intensity_range must lie within [0, 1]")
        if self.n_trees < 0 or self.depth < 1:
            raise UsageError("n_trees must be >= 0 and depth >= 1")
        if self.width_range[0] <= 0 or self.width_range[0] > self.width_range[1]:
            raise UsageError("width_range must be positive and ordered")


def _draw_segment(img, p0, p1, width, intensity):
    """Max-composite an anti-aliased capsule from p0 to p1 (row, col coordinates)."""
    ny, nx = img.shape
    r = width / 2 + 1.0
    i0 = max(int(math.floor(min(p0[0], p1[0]) - r)), 0)
    i1 = min(int(math.ceil(max(p0[0], p1[0]) + r)) + 1, ny)
    j0 = max(int(math.floor(min(p0[1], p1[1]) - r)), 0)
    j1 = min(int(math.ceil(max(p0[1], p1[1]) + r)) + 1, nx)
    if i0 >= i1 or j0 >= j1:
        return
    ii, jj = np.mgrid[i0:i1, j0:j1]
    d = np.array(p1, dtype=float) - np.array(p0, dtype=float)
    L2 = float(d @ d)
    pi, pj = ii - p0[0], jj - p0[1]
    t = np.clip((pi * d[0] + pj * d[1]) / L2, 0.0, 1.0) if L2 > 0 else np.zeros_like(pi, dtype=float)
    dist = np.hypot(pi - t * d[0], pj - t * d[1])
    cover = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    np.maximum(img[i0:i1, j0:j1], intensity * cover, out=img[i0:i1, j0:j1])


def _grow(img, rng, start, heading, width, intensity, level, cfg, scale):
    curv = rng.uniform(*cfg.curvature_range)
    n_steps = int(rng.integers(6, 14))
    step = 1.6 * scale
    point = np.array(start, dtype=float)
    for k in range(n_steps):
        heading += curv + rng.normal(0.0, 0.08)
        nxt = point + step * np.array([math.sin(heading), math.cos(heading)])
        _draw_segment(img, point, nxt, width, intensity)
        point = nxt
        if level > 1 and k >= 2 and rng.random() < 0.22:
            side = 1.0 if rng.random() < 0.5 else -1.0
            _grow(img, rng, point.copy(), heading + side * rng.uniform(0.35, 1.0),
                  max(width * rng.uniform(0.6, 0.85), cfg.width_range[0] * 0.8),
                  intensity * rng.uniform(0.8, 1.0), level - 1, cfg, scale)


def generate_vessel_phantom(config: VesselPhantomConfig) -> np.ndarray:
    """Random branching vessel trees rasterised into ``config.shape``; values in [0, 1]."""
    img = np.zeros(config.shape, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    ny, nx = config.shape
    scale = min(ny, nx) / 64.0
    for _ in range(config.n_trees):
        start = (rng.uniform(0.15, 0.85) * (ny - 1), rng.uniform(0.15, 0.85) * (nx - 1))
        heading = rng.uniform(0, 2 * math.pi)
        width = rng.uniform(*config.width_range) * scale
        intensity = rng.uniform(*config.intensity_range)
        _grow(img, rng, start, heading, width, intensity, config.depth, config, scale)
    return np.clip(img, 0.0, 1.0)


def make_phantoms(n: int, shape=(64, 64), seed: int = 0, **kwargs) -> np.ndarray:
    """``n`` vessel phantoms with per-sample seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n) if n else []
    return np.stack([
        generate_vessel_phantom(VesselPhantomConfig(shape=tuple(shape), seed=int(s), **kwargs))
        for s in seeds
    ]) if n else np.zeros((0,) + tuple(shape))


# -- mask augmentation --------------------------------------------------------------


def rotate_nearest(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre with nearest-neighbour sampling and zero fill."""
    if angle_deg % 360 == 0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    a = math.radians(angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    ii, jj = np.mgrid[0:h, 0:w]
    y, x = ii - cy, jj - cx
    src_i = np.rint(ca * y + sa * x + cy).astype(int)
    src_j = np.rint(-sa * y + ca * x + cx).astype(int)
    ok = (src_i >= 0) & (src_i < h) & (src_j >= 0) & (src_j < w)
    out = np.zeros_like(img)
    out[ok] = img[src_i[ok], src_j[ok]]
    return out


def quadrants(mask: np.ndarray) -> list[np.ndarray]:
    h, w = mask.shape
    h2, w2 = h // 2, w // 2
    return [mask[:h2, :w2], mask[:h2, w2 : 2 * w2], mask[h2 : 2 * h2, :w2], mask[h2 : 2 * h2, w2 : 2 * w2]]


def _place_centered(frag: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float64)
    fh, fw = frag.shape
    oh, ow = shape
    i0, j0 = (oh - fh) // 2, (ow - fw) // 2
    si0, sj0 = max(-i0, 0), max(-j0, 0)
    di0, dj0 = max(i0, 0), max(j0, 0)
    hh = min(fh - si0, oh - di0)
    ww = min(fw - sj0, ow - dj0)
    out[di0 : di0 + hh, dj0 : dj0 + ww] = frag[si0 : si0 + hh, sj0 : sj0 + ww]
    return out


def augment_mask(mask: np.ndarray, seed: int, out_shape=None, angles=None, picks=None,
                 return_fragments: bool = False):
    """Quarter a vessel mask, rotate two quarters at random and superpose them.

    The two quarters (``picks``, drawn without replacement) are rotated by
    ``angles`` (uniform in [0, 360) degrees unless given), centred on a grid of
    ``out_shape`` (default: the mask shape) and combined by elementwise max.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or min(mask.shape) < 2:
        raise UsageError("mask must be a 2-D image of at least 2x2")
    out_shape = tuple(out_shape or mask.shape)
    rng = np.random.default_rng(seed)
    if picks is None:
        picks = rng.choice(4, size=2, replace=False)
    if angles is None:
        angles = rng.uniform(0.0, 360.0, size=2)
    quads = quadrants(mask)
    frags = [_place_centered(rotate_nearest(quads[int(k)], float(a)), out_shape)
             for k, a in zip(picks, angles)]
    out = np.clip(np.maximum(frags[0], frags[1]), 0.0, 1.0)
    if return_fragments:
        return out, frags
    return out


# -- grayscale files ------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) or plain (P2) portable graymap as integers; returns (array, maxval)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    pattern = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    for _ in range(4):
        m = pattern.match(raw, pos)
        if not m:
            raise FormatError(f"{path}: malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P2"):
        raise FormatError(f"{path}: not a graymap (magic {magic!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if magic == b"P2":
        vals = np.array(raw[pos:].split(), dtype=np.int64)
        if vals.size < w * h:
            raise FormatError(f"{path}: PGM data too short")
        return vals[: w * h].reshape(h, w), maxval
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * dtype.itemsize
    if len(raw) - pos < n:
        raise FormatError(f"{path}: PGM data too short")
    return np.frombuffer(raw, dtype, w * h, pos).reshape(h, w).astype(np.int64), maxval


def write_pgm(path, img8: np.ndarray) -> None:
    img8 = np.asarray(img8)
    if img8.ndim != 2:
        raise ShapeError("PGM export needs a 2-D image")
    h, w = img8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.clip(img8, 0, 255).astype(np.uint8).tobytes())


def resample_nearest(img: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour resampling: output pixel i reads input floor((i + 0.5) * h_in / h_out)."""
    h, w = img.shape
    oh, ow = shape
    ri = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
    rj = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
    return img[np.ix_(ri, rj)]


def load_mask_image(path, shape=None) -> np.ndarray:
    """Grayscale mask scaled to [0, 1] (8-bit value / 255) and resampled to ``shape``."""
    try:
        vals, maxval = read_pgm(path)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    img = vals.astype(np.float64) / float(maxval)
    if shape is not None and tuple(shape) != img.shape:
        img = resample_nearest(img, shape)
    return img


# -- synthesis ------------------------------------------------------------------------


def upsample_bilinear(img: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear interpolation onto a grid whose pixels subdivide the input pixels."""
    if factor == 1:
        return np.array(img, dtype=np.float64)
    h, w = img.shape
    ci = (np.arange(h * factor) + 0.5) / factor - 0.5
    cj = (np.arange(w * factor) + 0.5) / factor - 0.5
    gi, gj = np.meshgrid(ci, cj, indexing="ij")
    return map_coordinates(np.asarray(img, dtype=np.float64), [gi, gj], order=1, mode="nearest")


def restrict_time(fine: np.ndarray, factor: int, n_coarse: int) -> np.ndarray:
    """Map a ``factor``-times oversampled signal onto the coarse time axis.

    Each coarse sample takes the triangle-weighted sum of the fine samples
    within one coarse period, which redistributes every fine deposit exactly
    as linear interpolation on the coarse grid would.
    """
    if factor == 1:
        return fine[..., :n_coarse].copy()
    out = np.zeros(fine.shape[:-1] + (n_coarse,))
    n_fine = fine.shape[-1]
    centers = np.arange(n_coarse) * factor
    for off in range(-factor + 1, factor):
        wgt = 1.0 - abs(off) / factor
        idx = centers + off
        ok = (idx >= 0) & (idx < n_fine)
        out[..., ok] += wgt * fine[..., idx[ok]]
    return out


def fine_geometry(geometry: ImagingGeometry, factor: int) -> ImagingGeometry:
    """Refined generation geometry whose time axis runs past the coarse window if needed.

    Sub-pixels near the far corners can lie slightly beyond the farthest coarse
    pixel centre; their arrivals after the recording window are simply not
    recorded (the time restriction drops them).
    """
    fine = geometry.refined(factor)
    tof = fine.distances().max() / fine.sound_speed
    need = math.ceil((tof - fine.t_start) / fine.sample_period) + 2
    if need > fine.n_samples:
        fine = replace(fine, n_samples=need)
    return fine


@dataclass
class Dataset:
    geometry: ImagingGeometry
    phantoms: np.ndarray      # (N, ny, nx)
    sinograms: np.ndarray     # (N, n_detectors, n_samples)
    split: list[str]          # "train" / "test" per sample
    noise_sigma: float = 0.0
    fine_factor: int = 1
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.phantoms)
        if self.phantoms.shape[1:] != self.geometry.image_shape:
            raise ShapeError("phantom shape does not match geometry")
        if self.sinograms.shape != (n,) + self.geometry.sinogram_shape:
            raise ShapeError("sinogram shape does not match geometry")
        if len(self.split) != n or not set(self.split) <= {"train", "test"}:
            raise UsageError("split labels must be 'train'/'test', one per sample")

    def __len__(self):
        return len(self.phantoms)

    def train_indices(self) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == "train"], dtype=int)

    def test_indices(self) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == "test"], dtype=int)

    def samples(self, which: str = "test"):
        idx = self.test_indices() if which == "test" else self.train_indices() if which == "train" else range(len(self))
        for i in idx:
            yield int(i), self.phantoms[i], self.sinograms[i]


def split_labels(n: int, n_test: int, seed: int) -> list[str]:
    if not 0 <= n_test <= n:
        raise UsageError("n_test must lie in [0, n]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    test = set(rng.permutation(n)[:n_test].tolist())
    return ["test" if i in test else "train" for i in range(n)]


def synthesize_dataset(geometry: ImagingGeometry, phantoms, noise_sigma: float = 0.0,
                       fine_factor: int = 2, seed: int = 0, n_test: int = 0) -> Dataset:
    """Forward-project phantoms on a finer model and add seeded Gaussian noise.

    The generating model uses a ``fine_factor``-times finer pixel grid and time
    axis than ``geometry``; phantoms are bilinearly upsampled onto it and the
    fine sinograms restricted back to the coarse time axis.  Noise has standard
    deviation ``noise_sigma * max|b|`` per sample.  Values are rounded to 32-bit
    precision so that saved files round-trip exactly.
    """
    if fine_factor < 1 or int(fine_factor) != fine_factor:
        raise UsageError("fine_factor must be a positive integer")
    if noise_sigma < 0:
        raise UsageError("noise_sigma must be non-negative")
    fine_factor = int(fine_factor)
    phantoms = np.asarray(phantoms, dtype=np.float64)
    if phantoms.ndim == 2:
        phantoms = phantoms[None]
    if phantoms.shape[1:] != geometry.image_shape:
        raise ShapeError(f"phantoms {phantoms.shape[1:]} do not match grid {geometry.image_shape}")
    phantoms = phantoms.astype(np.float32).astype(np.float64)

    A_fine = op.build_system_matrix(fine_geometry(geometry, fine_factor))
    sinos = np.empty((len(phantoms),) + geometry.sinogram_shape)
    for i, p in enumerate(phantoms):
        fine = op.apply_forward(A_fine, upsample_bilinear(p, fine_factor))
        b = restrict_time(fine, fine_factor, geometry.n_samples)
        if noise_sigma > 0:
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            b = b + noise_sigma * np.abs(b).max() * rng.standard_normal(b.shape)
        sinos[i] = b
    sinos = sinos.astype(np.float32).astype(np.float64)
    return Dataset(geometry, phantoms, sinos, split_labels(len(phantoms), n_test, seed),
                   float(noise_sigma), fine_factor, int(seed))


# -- PADS container -------------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "geometry": dataset.geometry.to_dict(),
        "geometry_fingerprint": dataset.geometry.fingerprint,
        "n_samples": len(dataset),
        "split": list(dataset.split),
        "dtype": "f32",
        "noise_sigma": dataset.noise_sigma,
        "fine_factor": dataset.fine_factor,
        "seed": dataset.seed,
        "extra": dataset.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PADS_MAGIC)
        fh.write(struct.pack("<II", PADS_VERSION, len(blob)))
        fh.write(blob)
        for p, b in zip(dataset.phantoms, dataset.sinograms):
            fh.write(p.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())


def load_dataset(path, expected_geometry: ImagingGeometry | None = None) -> Dataset:
    """Read a PADS file.

    Raises distinct errors for a bad magic, an unknown version, a short file
    and a geometry fingerprint that does not match (the stored geometry or
    ``expected_geometry``).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PADS_MAGIC:
        raise MagicError(f"{path}: not a PADS dataset file")
    if len(raw) < 12:
        raise TruncationError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != PADS_VERSION:
        raise VersionError(f"{path}: unsupported PADS version {version}")
    if len(raw) < 12 + hlen:
        raise TruncationError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except ValueError:
        raise FormatError(f"{path}: corrupt header") from None
    geometry = ImagingGeometry.from_dict(header["geometry"])
    if header.get("geometry_fingerprint") != geometry.fingerprint:
        raise FingerprintError(f"{path}: stored geometry fingerprint does not match its geometry")
    if expected_geometry is not None and expected_geometry.fingerprint != geometry.fingerprint:
        raise FingerprintError(f"{path}: dataset geometry differs from the expected geometry")
    n = int(header["n_samples"])
    img_n = geometry.n_pixels
    sino_n = geometry.n_detectors * geometry.n_samples
    need = 12 + hlen + 4 * n * (img_n + sino_n)
    if len(raw) != need:
        raise TruncationError(f"{path}: header promises {n} samples ({need} bytes), file has {len(raw)}")
    block = np.frombuffer(raw, "<f4", n * (img_n + sino_n), 12 + hlen).reshape(n, img_n + sino_n)
    phantoms = block[:, :img_n].astype(np.float64).reshape((n,) + geometry.image_shape)
    sinos = block[:, img_n:].astype(np.float64).reshape((n,) + geometry.sinogram_shape)
    return Dataset(geometry, phantoms, sinos, list(header["split"]), float(header["noise_sigma"]),
                   int(header["fine_factor"]), int(header["seed"]), header.get("extra", {}))
