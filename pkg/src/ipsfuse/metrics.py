"""Fusion quality metrics.

Reference metrics: ``psnr``, ``ssim``. No-reference metrics comparing the
fused image with both sources: ``q_mi`` (normalized mutual information),
``q_sf`` (spatial frequency, fused image only) and ``q_abf`` (Sobel edge
preservation).

Conventions:

* intensities are in [0, 1], peak value 1;
* gray conversion uses ITU-R BT.601 luma weights (0.299, 0.587, 0.114),
  except SSIM which averages the channels;
* SSIM uses an 11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03,
  evaluated over the valid region only;
* Q_MI uses 256 equal-width bins on [0, 1], no smoothing, and the form
  2 * [MI(A,F) / (H(A)+H(F)) + MI(B,F) / (H(B)+H(F))];
* Q_AB/F uses Sobel gradients with replicated borders, orientation
  arctan(gy/gx), sigmoid constants kappa_g = -15, sigma_g = 0.5,
  kappa_a = -22, sigma_a = 0.8, and gains 1 + exp(kappa (1 - sigma)) so a
  perfect transfer scores exactly 1; edge strength is the weight.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "MetricError",
    "METRICS",
    "REFERENCE_METRICS",
    "SOURCE_METRICS",
    "to_gray",
    "psnr",
    "ssim",
    "mutual_information",
    "q_mi",
    "q_sf",
    "q_abf",
    "MetricReport",
    "evaluate",
]

LUMA = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

QABF_KG, QABF_SG = -15.0, 0.5
QABF_KA, QABF_SA = -22.0, 0.8
QABF_GAIN_G = 1.0 + math.exp(QABF_KG * (1.0 - QABF_SG))
QABF_GAIN_A = 1.0 + math.exp(QABF_KA * (1.0 - QABF_SA))

MI_BINS = 256


class MetricError(ValueError):
    """A metric is undefined for the given input; the message says why."""


def _as_array(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W[, J]) image, got shape {arr.shape}")
    return arr


def _same_shape(*imgs) -> None:
    shapes = [i.shape for i in imgs]
    if len(set(shapes)) != 1:
        raise ValueError(f"images differ in shape: {shapes}")


def to_gray(img) -> np.ndarray:
    arr = _as_array(img)
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    return arr[:, :, :3] @ LUMA


def psnr(fused, reference) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    f, r = _as_array(fused), _as_array(reference)
    _same_shape(f, r)
    mse = float(np.mean((f - r) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:-r, r:-r]


def ssim(fused, reference) -> float:
    f = _as_array(fused).mean(axis=2)
    r = _as_array(reference).mean(axis=2)
    _same_shape(f, r)
    if min(f.shape) < SSIM_WINDOW:
        raise ValueError(f"image {f.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_f, mu_r = _filter_valid(f, g), _filter_valid(r, g)
    var_f = _filter_valid(f * f, g) - mu_f**2
    var_r = _filter_valid(r * r, g) - mu_r**2
    cov = _filter_valid(f * r, g) - mu_f * mu_r
    num = (2 * mu_f * mu_r + c1) * (2 * cov + c2)
    den = (mu_f**2 + mu_r**2 + c1) * (var_f + var_r + c2)
    return float(np.mean(num / den))


def _bins(gray: np.ndarray) -> np.ndarray:
    return np.minimum((gray.reshape(-1) * MI_BINS).astype(np.int64), MI_BINS - 1)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def mutual_information(x, y) -> tuple[float, float, float]:
    """Return ``(MI(x, y), H(x), H(y))`` in bits from 256-bin gray histograms."""
    bx, by = _bins(to_gray(x)), _bins(to_gray(y))
    if bx.shape != by.shape:
        raise ValueError("images differ in size")
    joint = np.bincount(bx * MI_BINS + by, minlength=MI_BINS * MI_BINS)
    hx = _entropy(np.bincount(bx, minlength=MI_BINS))
    hy = _entropy(np.bincount(by, minlength=MI_BINS))
    return hx + hy - _entropy(joint), hx, hy


def q_mi(fused, src_a, src_b) -> float:
    f, a, b = _as_array(fused), _as_array(src_a), _as_array(src_b)
    _same_shape(f, a, b)
    mi_af, h_a, h_f = mutual_information(a, f)
    mi_bf, h_b, _ = mutual_information(b, f)
    for name, h in (("fused", h_f), ("source A", h_a), ("source B", h_b)):
        if h == 0.0:
            raise MetricError(f"{name} image has zero entropy (constant gray level)")
    return 2.0 * (mi_af / (h_a + h_f) + mi_bf / (h_b + h_f))


def q_sf(fused) -> float:
    """Spatial frequency sqrt(RF^2 + CF^2) of the gray image."""
    g = to_gray(fused)
    if g.shape[0] < 2 or g.shape[1] < 2:
        raise ValueError(f"spatial frequency needs at least 2x2 pixels, got {g.shape}")
    rf2 = np.mean(np.diff(g, axis=1) ** 2)
    cf2 = np.mean(np.diff(g, axis=0) ** 2)
    return float(math.sqrt(rf2 + cf2))


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _edges(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.correlate(gray, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(gray, _SOBEL_Y, mode="nearest")
    strength = np.hypot(gx, gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        angle = np.where(gx == 0, math.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return strength, angle


def _edge_transfer(g_src, a_src, g_f, a_f) -> np.ndarray:
    hi = np.maximum(g_src, g_f)
    lo = np.minimum(g_src, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_strength = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 1.0)
    rel_angle = 1.0 - np.abs(a_src - a_f) / (math.pi / 2)
    qg = QABF_GAIN_G / (1.0 + np.exp(QABF_KG * (rel_strength - QABF_SG)))
    qa = QABF_GAIN_A / (1.0 + np.exp(QABF_KA * (rel_angle - QABF_SA)))
    return qg * qa


def q_abf(fused, src_a, src_b) -> float:
    f, a, b = _as_array(fused), _as_array(src_a), _as_array(src_b)
    _same_shape(f, a, b)
    g_a, t_a = _edges(to_gray(a))
    g_b, t_b = _edges(to_gray(b))
    g_f, t_f = _edges(to_gray(f))
    weight = g_a.sum() + g_b.sum()
    # Sobel on a constant image leaves roundoff of order 1e-16, not exact zeros
    if max(g_a.max(), g_b.max()) < 1e-12:
        raise MetricError("both sources have zero gradient everywhere")
    q = _edge_transfer(g_a, t_a, g_f, t_f) * g_a + _edge_transfer(g_b, t_b, g_f, t_f) * g_b
    return float(q.sum() / weight)


REFERENCE_METRICS = {"psnr": psnr, "ssim": ssim}
SOURCE_METRICS = {"q_mi": q_mi, "q_abf": q_abf}
METRICS = ("psnr", "ssim", "q_mi", "q_sf", "q_abf")


# ---------------------------------------------------------------- report

def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


@dataclass
class MetricReport:
    metrics: list[str]
    image_ids: list[str] = field(default_factory=list)
    values: dict[str, dict[str, float]] = field(default_factory=dict)
    failures: dict[str, dict[str, str]] = field(default_factory=dict)

    def aggregate(self) -> dict[str, float]:
        out = {}
        for m in self.metrics:
            vals = [self.values[i][m] for i in self.image_ids if m in self.values.get(i, {})]
            if vals:
                out[m] = float(np.mean(vals))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "metric", "value"])
        for i in self.image_ids:
            for m in self.metrics:
                if m in self.values.get(i, {}):
                    w.writerow([i, m, _fmt(self.values[i][m])])
                else:
                    w.writerow([i, m, "failed"])
        buf.write("\n")
        w.writerow(["aggregate", "metric", "mean"])
        for m, v in self.aggregate().items():
            w.writerow(["mean", m, _fmt(v)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        def enc(v):
            return _fmt(v) if math.isinf(v) else v

        return {
            "metrics": self.metrics,
            "image_ids": self.image_ids,
            "values": {i: {m: enc(v) for m, v in d.items()} for i, d in self.values.items()},
            "failures": self.failures,
            "aggregate": {m: enc(v) for m, v in self.aggregate().items()},
        }

    def write(self, csv_path, json_path=None) -> None:
        Path(csv_path).write_text(self.to_csv(), encoding="utf-8")
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def evaluate(fused: dict, metrics=METRICS, references: dict | None = None,
             sources: dict | None = None) -> MetricReport:
    """Score each fused image by id.

    ``references`` maps id -> ground truth (for psnr/ssim); ``sources`` maps
    id -> (A, B) (for q_mi/q_abf). A metric whose inputs are missing, or that
    raises, is recorded as a failure with the reason.
    """
    metrics = list(metrics)
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    report = MetricReport(metrics=metrics, image_ids=sorted(fused))
    for image_id in report.image_ids:
        img = fused[image_id]
        vals, fails = {}, {}
        for m in metrics:
            try:
                if m == "q_sf":
                    vals[m] = q_sf(img)
                elif m in REFERENCE_METRICS:
                    if references is None or image_id not in references:
                        raise MetricError("no reference image")
                    vals[m] = REFERENCE_METRICS[m](img, references[image_id])
                else:
                    if sources is None or image_id not in sources:
                        raise MetricError("no source images")
                    a, b = sources[image_id]
                    vals[m] = SOURCE_METRICS[m](img, a, b)
            except (MetricError, ValueError) as exc:
                fails[m] = str(exc)
        report.values[image_id] = vals
        if fails:
            report.failures[image_id] = fails
    return report
