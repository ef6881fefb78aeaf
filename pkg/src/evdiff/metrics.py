"""Reconstruction quality metrics and the sequence evaluation protocol.

The perceptual metric is an explicitly-labeled proxy (multi-scale
gradient-orientation histograms); reports carry its identifier so the
numbers are never mistaken for network-based LPIPS. A network-based metric
with the same (a, b) -> float signature can be passed to
`evaluate_sequence` as a drop-in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import GeometryError, ValidationError

PERCEPTUAL_PROXY_ID = "grad-orient-proxy"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_image(img) -> np.ndarray:
    from .diffusion import image_values

    arr = image_values(img)
    if arr.ndim != 2:
        raise ValidationError("expected a 2-D image")
    return arr


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = _as_image(a)
    b = _as_image(b)
    if a.shape != b.shape:
        raise GeometryError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def histogram_equalize(img) -> np.ndarray:
    """Remap gray levels through the 256-bin cumulative histogram.

    The CDF is evaluated with linear interpolation inside bins, giving a
    monotone map onto [0, 1]. A constant image is returned unchanged (its
    CDF is a single step and the remap would be degenerate).
    """
    arr = _as_image(img)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError("histogram equalization expects values in [0, 1]")
    if arr.size == 0 or arr.min() == arr.max():
        return arr.copy()
    hist, edges = np.histogram(arr, bins=256, range=(0.0, 1.0))
    cdf = np.cumsum(hist) / arr.size
    return np.interp(arr, edges[1:], cdf, left=0.0).reshape(arr.shape)


def mse(a, b) -> float:
    """Mean squared pixel difference."""
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b) -> float:
    """Mean local structural similarity (11x11 Gaussian window, sigma 1.5).

    Uses the standard constants K1 = 0.01, K2 = 0.03 at dynamic range 1.0,
    averaging the local map over the valid (fully-covered) region.
    """
    a, b = _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValidationError(f"image must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    var_a = convolve2d(a * a, win, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, win, mode="valid") - mu_b**2
    cov = convolve2d(a * b, win, mode="valid") - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    c = img[:h, :w]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def _orientation_histograms(img: np.ndarray, bins: int, cell: int) -> np.ndarray:
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    idx = np.minimum((theta / np.pi * bins).astype(np.int64), bins - 1)

    h, w = img.shape
    cy = max(h // cell, 1)
    cx = max(w // cell, 1)
    hists = np.zeros((cy, cx, bins))
    ys = np.minimum(np.arange(h) * cy // h, cy - 1)
    xs = np.minimum(np.arange(w) * cx // w, cx - 1)
    np.add.at(hists, (ys[:, None].repeat(w, 1), xs[None, :].repeat(h, 0), idx), mag)
    norms = np.linalg.norm(hists, axis=-1, keepdims=True)
    return hists / np.maximum(norms, 1e-12)


def perceptual_proxy(a, b, *, scales: int = 3, bins: int = 8, cell: int = 8) -> float:
    """Multi-scale mean L2 distance between gradient-orientation histograms.

    Fixed recipe: `scales` octaves of 2x average pooling; per octave,
    magnitude-weighted orientation histograms (`bins` unsigned bins) over
    `cell` x `cell` regions, each L2-normalized; the score is the mean
    Euclidean distance between corresponding histograms. Symmetric, zero at
    identity.
    """
    a, b = _check_pair(a, b)
    dists = []
    for _ in range(scales):
        ha = _orientation_histograms(a, bins, cell)
        hb = _orientation_histograms(b, bins, cell)
        dists.append(np.linalg.norm(ha - hb, axis=-1).mean())
        if min(a.shape) < 2 * cell:
            break
        a = _halve(a)
        b = _halve(b)
    return float(np.mean(dists))


@dataclass
class MetricReport:
    """Per-frame and mean metric values with the protocol flags used."""

    mse: np.ndarray
    ssim: np.ndarray
    perceptual: np.ndarray
    equalized: bool
    perceptual_id: str = PERCEPTUAL_PROXY_ID

    def __post_init__(self):
        self.mse = np.asarray(self.mse, dtype=np.float64)
        self.ssim = np.asarray(self.ssim, dtype=np.float64)
        self.perceptual = np.asarray(self.perceptual, dtype=np.float64)
        if not (self.mse.shape == self.ssim.shape == self.perceptual.shape) or self.mse.ndim != 1:
            raise ValidationError("per-frame metric arrays must be 1-D and equal length")

    @property
    def frame_count(self) -> int:
        return int(self.mse.shape[0])

    @property
    def mean_mse(self) -> float:
        return float(self.mse.mean())

    @property
    def mean_ssim(self) -> float:
        return float(self.ssim.mean())

    @property
    def mean_perceptual(self) -> float:
        return float(self.perceptual.mean())

    def to_csv(self) -> str:
        lines = [
            "# evdiff-metrics v1",
            f"# equalize={'true' if self.equalized else 'false'} perceptual={self.perceptual_id}",
            "frame,mse,ssim,perceptual",
        ]
        for i in range(self.frame_count):
            lines.append(f"{i},{float(self.mse[i])!r},{float(self.ssim[i])!r},{float(self.perceptual[i])!r}")
        lines.append(f"mean,{self.mean_mse!r},{self.mean_ssim!r},{self.mean_perceptual!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < 3 or lines[0] != "# evdiff-metrics v1":
            raise ValidationError("not a metrics CSV")
        flags = dict(part.split("=", 1) for part in lines[1][2:].split())
        rows = [ln.split(",") for ln in lines[3:]]
        data = [r for r in rows if r[0] != "mean"]
        return cls(
            mse=np.array([float(r[1]) for r in data]),
            ssim=np.array([float(r[2]) for r in data]),
            perceptual=np.array([float(r[3]) for r in data]),
            equalized=flags["equalize"] == "true",
            perceptual_id=flags["perceptual"],
        )

    def save(self, path: str | Path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_csv(Path(path).read_text())

    def table(self) -> str:
        lines = [f"{'frame':>6} {'mse':>12} {'ssim':>12} {'perceptual':>12}"]
        for i in range(self.frame_count):
            lines.append(f"{i:>6} {self.mse[i]:>12.6f} {self.ssim[i]:>12.6f} {self.perceptual[i]:>12.6f}")
        lines.append(f"{'mean':>6} {self.mean_mse:>12.6f} {self.mean_ssim:>12.6f} {self.mean_perceptual:>12.6f}")
        lines.append(f"(equalize={'on' if self.equalized else 'off'}, perceptual={self.perceptual_id})")
        return "\n".join(lines)


def evaluate_sequence(pred, ref, equalize: bool = True, perceptual=None, perceptual_id: str | None = None) -> MetricReport:
    """Score a predicted video against a reference, frame by frame.

    With `equalize` (the default protocol) both streams are histogram
    equalized before any metric is computed. `perceptual` may override the
    gradient-orientation proxy with another (a, b) -> float callable; give
    it a `perceptual_id` so reports stay attributable.
    """
    pred = np.asarray(getattr(pred, "frames", pred), dtype=np.float64)
    ref = np.asarray(getattr(ref, "frames", ref), dtype=np.float64)
    if pred.shape[0] != ref.shape[0]:
        raise ValidationError(f"frame counts differ: {pred.shape[0]} vs {ref.shape[0]}")
    metric = perceptual if perceptual is not None else perceptual_proxy
    metric_id = perceptual_id if perceptual_id is not None else (
        PERCEPTUAL_PROXY_ID if perceptual is None else "custom"
    )

    mses, ssims, percs = [], [], []
    for i in range(pred.shape[0]):
        a, b = pred[i], ref[i]
        if equalize:
            a = histogram_equalize(a)
            b = histogram_equalize(b)
        mses.append(mse(a, b))
        ssims.append(ssim(a, b))
        percs.append(metric(a, b))
    return MetricReport(np.array(mses), np.array(ssims), np.array(percs), equalize, metric_id)
