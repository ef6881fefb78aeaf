"""Synthetic desk-scale scenes: moving bar / square / texture sequences.

Shapes are rendered on a 4x supersampled grid and box-downsampled, so motion
is subpixel-smooth and the threshold simulator sees gradual edges instead of
binary jumps.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .events import FrameSequence, SensorGeometry
from .rng import RngState

PATTERNS = ("square", "bar", "texture")
SUPERSAMPLE = 4


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // SUPERSAMPLE, img.shape[1] // SUPERSAMPLE
    return img.reshape(h, SUPERSAMPLE, w, SUPERSAMPLE).mean(axis=(1, 3))


def make_scene(
    geometry: SensorGeometry,
    pattern: str = "square",
    n_frames: int = 16,
    *,
    speed: float = 1.0,
    foreground: float = 0.85,
    background: float = 0.3,
    size: int = 10,
    fps: float = 100.0,
    seed: int = 0,
    phase: float = 0.0,
) -> FrameSequence:
    """Render a moving pattern; `phase` offsets the motion (held-out segments).

    `speed` is in pixels per frame along a diagonal drift that wraps around
    the sensor; `size` is the edge length of the square / width of the bar.
    """
    if pattern not in PATTERNS:
        raise ValidationError(f"pattern must be one of {PATTERNS}, got {pattern!r}")
    if n_frames < 1:
        raise ValidationError("need at least one frame")
    h, w = geometry.shape
    hs, ws = h * SUPERSAMPLE, w * SUPERSAMPLE
    rng = RngState(seed)

    if pattern == "texture":
        # Smooth random texture, built once and translated.
        noise = rng.normal((hs, ws))
        spec = np.fft.fft2(noise)
        fy = np.fft.fftfreq(hs)[:, None]
        fx = np.fft.fftfreq(ws)[None, :]
        spec *= np.exp(-((fy**2 + fx**2) / (2 * 0.03**2)))
        tex = np.fft.ifft2(spec).real
        tex = (tex - tex.min()) / (tex.max() - tex.min())
        tex = background + (foreground - background) * tex

    ys = np.arange(hs)[:, None]
    xs = np.arange(ws)[None, :]
    frames = []
    for k in range(n_frames):
        shift = (phase + k * speed) * SUPERSAMPLE
        if pattern == "texture":
            canvas = np.roll(np.roll(tex, int(round(shift)), axis=1), int(round(shift / 2)), axis=0)
        else:
            canvas = np.full((hs, ws), background)
            cx = (shift + size * SUPERSAMPLE) % ws
            cy = (shift / 2 + size * SUPERSAMPLE) % hs
            half = size * SUPERSAMPLE / 2.0
            dx = np.minimum(np.abs(xs - cx), ws - np.abs(xs - cx))
            dy = np.minimum(np.abs(ys - cy), hs - np.abs(ys - cy))
            if pattern == "square":
                inside = (dx <= half) & (dy <= half)
            else:  # vertical bar sweeping horizontally
                inside = dx <= half
            canvas[inside] = foreground
        frames.append(np.clip(_downsample(canvas), 0.0, 1.0))

    timestamps = np.arange(n_frames, dtype=np.float64) / fps
    return FrameSequence(np.stack(frames), timestamps, geometry)
