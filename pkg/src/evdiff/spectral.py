"""Frequency-domain diagnostics: spectra, band splits, event similarity."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

DEFAULT_CUTOFF = 0.125


@dataclass
class SpectrumImage:
    """Zero-frequency-centered log-magnitude spectrum."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("spectrum must be 2-D")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValidationError("spectrum entries must be finite and non-negative")


def fft_magnitude_spectrum(img) -> SpectrumImage:
    """log(1 + |F|) of the 2-D transform, shifted so DC sits at the center."""
    from .diffusion import image_values

    arr = image_values(img)
    spec = np.fft.fftshift(np.fft.fft2(arr))
    return SpectrumImage(np.log1p(np.abs(spec)))


def _radial_frequency(shape) -> np.ndarray:
    # Frequencies normalized so the Nyquist rate maps to radius 1.
    fy = np.fft.fftfreq(shape[0]) * 2.0
    fx = np.fft.fftfreq(shape[1]) * 2.0
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def split_frequency(img, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Split into complementary bands with a hard radial mask at `cutoff`.

    The masks partition the frequency plane, so low + high reproduces the
    input and the bands are orthogonal (the energies add up).
    """
    from .diffusion import image_values

    if not 0.0 < cutoff < 1.0:
        raise ValidationError(f"cutoff must lie in (0, 1), got {cutoff}")
    arr = image_values(img)
    spec = np.fft.fft2(arr)
    mask_low = _radial_frequency(arr.shape) <= cutoff
    low = np.fft.ifft2(spec * mask_low).real
    high = np.fft.ifft2(spec * ~mask_low).real
    return low, high


def highfreq_event_similarity(recon, voxel_agg, cutoff: float = DEFAULT_CUTOFF) -> float:
    """Correlation between reconstruction high-band magnitude and event mass.

    Zero-mean normalized cross-correlation between |high-pass(recon)| and
    |voxel_agg|; returns 0 when either side has no variance.
    """
    from .diffusion import image_values

    recon = image_values(recon)
    agg = np.abs(np.asarray(voxel_agg, dtype=np.float64))
    if recon.shape != agg.shape:
        raise ValidationError(f"image shapes differ: {recon.shape} vs {agg.shape}")
    _, high = split_frequency(recon, cutoff)
    a = np.abs(high) - np.abs(high).mean()
    b = agg - agg.mean()
    denom = np.sqrt((a**2).sum() * (b**2).sum())
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


def export_grayscale(path: str | Path, arr: np.ndarray):
    """Write a min-max normalized 8-bit PNG plus a sidecar with the bounds.

    The sidecar (`<name>.range.txt`) records the pre-normalization min/max so
    exported panels stay comparable.
    """
    path = Path(path)
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        norm = (arr - lo) / (hi - lo)
    else:
        norm = np.zeros_like(arr)
    img = np.clip(np.round(norm * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
    path.with_suffix(path.suffix + ".range.txt").write_text(f"min {lo!r}\nmax {hi!r}\n")
