"""DICE, PSNR and SSIM on probability maps, plus mean/std aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bmapest.errors import ValidationError
from bmapest.phantom import TISSUES, ProbabilityMaps

METRICS = ("dice", "psnr", "ssim")


@dataclass(frozen=True)
class MetricRow:
    tissue: str
    dice: float
    psnr: float
    ssim: float


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt, threshold: float = 0.5) -> float:
    """Overlap of the masks ``pred > threshold`` and ``gt > threshold``; 1 if both are empty."""
    pred, gt = _pair(pred, gt)
    a = pred > threshold
    b = gt > threshold
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def psnr(pred, gt, peak: float = 1.0) -> float:
    pred, gt = _pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, gt, win: int = 7, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained Gaussian windows."""
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2 or min(pred.shape) < win:
        raise ValidationError(f"image {pred.shape} smaller than the {win}x{win} SSIM window")
    w = gaussian_window(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def wmean(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, (win, win)), w)

    mx, my = wmean(pred), wmean(gt)
    vx = wmean(pred * pred) - mx * mx
    vy = wmean(gt * gt) - my * my
    cxy = wmean(pred * gt) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def evaluate(pred: ProbabilityMaps, gt: ProbabilityMaps, threshold: float = 0.5) -> list[MetricRow]:
    """One row per tissue comparing realized (projected) maps to ground truth."""
    rows = []
    for t in TISSUES:
        p = np.clip(pred.channel(t), 0.0, 1.0)
        g = gt.channel(t)
        rows.append(MetricRow(t, dice(p, g, threshold), psnr(p, g), ssim(p, g)))
    return rows


def aggregate(rows) -> dict:
    """Population mean and std per (tissue, metric) over subjects."""
    rows = list(rows)
    out: dict[tuple[str, str], tuple[float, float]] = {}
    for t in TISSUES:
        sub = [r for r in rows if r.tissue == t]
        if not sub:
            continue
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in sub], dtype=np.float64)
            if np.isinf(vals).any():
                out[(t, m)] = (float(vals.mean()), 0.0 if np.isinf(vals).all() else math.inf)
            else:
                out[(t, m)] = (float(vals.mean()), float(vals.std()))
    return out


def fmt(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tissue", *METRICS])
        for r in rows:
            wr.writerow([r.tissue, repr(r.dice), repr(r.psnr), repr(r.ssim)])
