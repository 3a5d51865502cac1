"""PSNR / SSIM and mean +- std evaluation tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError, UsageError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(reference, test):
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ShapeError(f"image shapes differ: {reference.shape} vs {test.shape}")
    return reference, test


def _mean_std(values) -> tuple[float, float]:
    """Mean and population std; a column of identical values (even inf) has std 0."""
    v = np.asarray(values, dtype=np.float64)
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std())


def default_data_range(reference) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    return float(reference.max() - reference.min())


def psnr(reference, test, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    reference, test = _pair(reference, test)
    if data_range is None:
        data_range = default_data_range(reference)
    if not data_range > 0:
        raise UsageError("data_range must be positive")
    mse = float(np.mean((reference - test) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def ssim(reference, test, data_range: float | None = None) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use symmetric ("reflect") boundary extension.
    """
    reference, test = _pair(reference, test)
    if reference.ndim != 2 or min(reference.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    if data_range is None:
        data_range = default_data_range(reference)
    if not data_range > 0:
        raise UsageError("data_range must be positive")
    w = gaussian_window()

    def blur(img):
        return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = blur(reference)
    mu_y = blur(test)
    sxx = blur(reference * reference) - mu_x * mu_x
    syy = blur(test * test) - mu_y * mu_y
    sxy = blur(reference * test) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-sample scores plus summary rows, one per (method, iteration)."""

    rows: list[dict] = field(default_factory=list)

    def summary(self) -> list[dict]:
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["method"], r["iteration"]), []).append(r)
        out = []
        for (method, iteration), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            pm, psd = _mean_std([r["psnr_db"] for r in rs])
            sm, ssd = _mean_std([r["ssim"] for r in rs])
            out.append({
                "method": method,
                "iteration": iteration,
                "n": len(rs),
                "psnr_mean": pm,
                "psnr_std": psd,
                "ssim_mean": sm,
                "ssim_std": ssd,
            })
        return out

    def get(self, method: str, iteration: int = 0) -> dict:
        for row in self.summary():
            if row["method"] == method and row["iteration"] == iteration:
                return row
        raise KeyError((method, iteration))

    def per_sample(self, method: str, iteration: int = 0, key: str = "ssim") -> np.ndarray:
        rs = sorted((r for r in self.rows if r["method"] == method and r["iteration"] == iteration),
                    key=lambda r: r["sample_id"])
        return np.array([r[key] for r in rs])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "method", "iteration", "psnr_db", "ssim"])
            for r in self.rows:
                w.writerow([r["sample_id"], r["method"], r["iteration"], repr(r["psnr_db"]), repr(r["ssim"])])

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "iteration", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
            for r in self.summary():
                w.writerow([r["method"], r["iteration"], repr(r["psnr_mean"]), repr(r["psnr_std"]),
                            repr(r["ssim_mean"]), repr(r["ssim_std"])])


def evaluate_method(samples, reconstructor, method: str = "method", first_iteration: int = 0,
                    report: MetricReport | None = None) -> MetricReport:
    """Score ``reconstructor(sinogram)`` against ground truth for every sample.

    ``samples`` is an iterable of ``(sample_id, phantom, sinogram)``.  If the
    reconstructor returns a list of iterates, each gets its own iteration
    number starting at ``first_iteration``.  ``data_range`` is taken from each
    ground-truth image.
    """
    report = report if report is not None else MetricReport()
    n = 0
    for sample_id, gt, b in samples:
        out = reconstructor(b)
        images = out if isinstance(out, (list, tuple)) else [out]
        dr = default_data_range(gt)
        for k, img in enumerate(images):
            report.rows.append({
                "sample_id": int(sample_id),
                "method": method,
                "iteration": first_iteration + k,
                "psnr_db": psnr(gt, img, dr),
                "ssim": ssim(gt, img, dr),
            })
        n += 1
    if n == 0:
        raise UsageError("cannot evaluate on an empty test split")
    return report


def evaluate_images(ground_truths, images) -> dict:
    """Mean / population std of PSNR and SSIM over paired image stacks."""
    ps = [psnr(g, x, default_data_range(g)) for g, x in zip(ground_truths, images)]
    ss = [ssim(g, x, default_data_range(g)) for g, x in zip(ground_truths, images)]
    if not ss:
        raise UsageError("cannot evaluate an empty image stack")
    pm, psd = _mean_std(ps)
    sm, ssd = _mean_std(ss)
    return {"psnr_mean": pm, "psnr_std": psd, "ssim_mean": sm, "ssim_std": ssd, "n": len(ss)}
