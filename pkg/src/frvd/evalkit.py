"""Frame metrics and the CSV report.

L1 and PSNR operate on [0,1] RGB directly; SSIM converts to grayscale
(channel mean), applies an 11x11 Gaussian window (sigma 1.5) in valid mode,
and uses the standard constants C1=0.01^2, C2=0.03^2 for unit data range.
Pose distance compares projected extractor keypoints of generated and driving
frames in pixel units; the identity proxy is the cosine between pooled
appearance features.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import DataError, ShapeMismatchError
from .motion_repr import project_2d

REPORT_COLUMNS = ("clip", "frame", "l1", "psnr", "ssim", "pose_px", "id_proxy")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def metric_l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.abs(a - b).mean())


def metric_psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.square(a - b).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-np.square(coords) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def metric_ssim(a, b, window_size: int = 11, sigma: float = 1.5) -> float:
    a, b = _pair(a, b)
    ga, gb = to_gray(a), to_gray(b)
    if min(ga.shape) < window_size:
        raise ValueError(f"image {ga.shape} smaller than the {window_size}x"
                         f"{window_size} window")
    w = gaussian_window(window_size, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a = convolve2d(ga, w, mode="valid")
    mu_b = convolve2d(gb, w, mode="valid")
    var_a = convolve2d(ga * ga, w, mode="valid") - mu_a * mu_a
    var_b = convolve2d(gb * gb, w, mode="valid") - mu_b * mu_b
    cov = convolve2d(ga * gb, w, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def pose_distance(generated, driving, extractor) -> float:
    """Mean keypoint distance in pixels between paired frames."""
    import torch
    gen = list(generated)
    drv = list(driving)
    if len(gen) != len(drv):
        raise ShapeMismatchError(f"frame counts differ: {len(gen)} vs {len(drv)}")
    half = extractor.cfg.image_size / 2.0
    dists = []
    with torch.no_grad():
        for g, d in zip(gen, drv):
            kg = project_2d(extractor.extract_motion(g).x)
            kd = project_2d(extractor.extract_motion(d).x)
            dists.append(float((kg - kd).norm(dim=-1).mean()) * half)
    return float(np.mean(dists))


def identity_proxy(generated, source, extractor) -> float:
    """Mean cosine between pooled appearance features and the source's."""
    import torch
    with torch.no_grad():
        ref = extractor.extract_appearance(source).mean(dim=(1, 2))
        ref = ref / ref.norm().clamp_min(1e-12)
        sims = []
        for g in generated:
            feat = extractor.extract_appearance(g).mean(dim=(1, 2))
            sims.append(float((feat / feat.norm().clamp_min(1e-12)) @ ref))
    return float(np.mean(sims))


@dataclass(frozen=True)
class MetricRow:
    clip: str
    frame: object          # int index or the string "mean"
    l1: float
    psnr: float
    ssim: float
    pose_px: float
    id_proxy: float

    def values(self) -> tuple:
        return (self.l1, self.psnr, self.ssim, self.pose_px, self.id_proxy)


def write_report(rows, path) -> Path:
    """Header, one line per row, then a trailing mean row over the body."""
    rows = list(rows)
    cols = list(zip(*(r.values() for r in rows))) if rows else [()] * 5
    means = [float(np.mean(c)) if len(c) else math.nan for c in cols]
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for r in rows:
                writer.writerow([r.clip, r.frame] + [repr(v) for v in r.values()])
            writer.writerow(["mean", "mean"] + [repr(v) for v in means])
    except OSError as exc:
        raise DataError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path) -> list:
    """Parse a write_report CSV back into MetricRow objects (mean row last)."""
    out = []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != REPORT_COLUMNS:
                raise DataError(f"unexpected report header {header} in {path}")
            for row in reader:
                out.append(MetricRow(row[0], row[1] if row[1] == "mean" else int(row[1]),
                                     *(float(v) for v in row[2:])))
    except OSError as exc:
        raise DataError(f"cannot read report from {path}: {exc}") from exc
    return out
