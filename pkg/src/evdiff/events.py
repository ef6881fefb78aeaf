"""Event streams: types, EVT1 parsing, threshold simulation, windowing, voxels.

Events are kept as parallel numpy arrays inside :class:`EventWindow` so the
hot paths (voxelization, segmentation) stay vectorized; :class:`Event` is the
per-record view used at API boundaries and in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import EventFormatError, GeometryError, MissingArtifactError, ValidationError

EVT1_MAGIC = "EVT1"
DEFAULT_MAX_DENSITY = 0.25


@dataclass(frozen=True)
class SensorGeometry:
    """Pixel array dimensions of the event sensor."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"sensor geometry must be >= 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def pixels(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class Event:
    """A single polarity spike: time in seconds, pixel column/row, sign."""

    t: float
    x: int
    y: int
    p: int

    def __post_init__(self):
        if self.p not in (1, -1):
            raise ValidationError(f"polarity must be +1 or -1, got {self.p}")
        if self.t < 0:
            raise ValidationError(f"timestamp must be non-negative, got {self.t}")


class EventWindow:
    """A time-ordered slice of an event stream on a fixed sensor.

    Stores events as parallel arrays (t float64, x/y int32, p int8). The
    constructor validates ordering, bounds, and polarity; use
    :meth:`from_events` to build from `Event` records.
    """

    __slots__ = ("t", "x", "y", "p", "t_start", "t_end", "geometry")

    def __init__(self, t, x, y, p, t_start: float, t_end: float, geometry: SensorGeometry):
        self.t = np.ascontiguousarray(t, dtype=np.float64)
        self.x = np.ascontiguousarray(x, dtype=np.int32)
        self.y = np.ascontiguousarray(y, dtype=np.int32)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        self.geometry = geometry
        self._validate()

    def _validate(self):
        n = self.t.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == self.p.shape[0] == n):
            raise ValidationError("event component arrays must have equal length")
        if self.t_end < self.t_start:
            raise ValidationError(f"t_end {self.t_end} precedes t_start {self.t_start}")
        if n == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise ValidationError("event timestamps must be non-decreasing")
        if self.t[0] < self.t_start or self.t[-1] > self.t_end:
            raise ValidationError("event timestamps fall outside [t_start, t_end]")
        if np.any(self.t < 0):
            raise ValidationError("event timestamps must be non-negative")
        oob = (self.x < 0) | (self.x >= self.geometry.width) | (self.y < 0) | (self.y >= self.geometry.height)
        if np.any(oob):
            i = int(np.argmax(oob))
            raise GeometryError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside {self.geometry.width}x{self.geometry.height} sensor"
            )
        if not np.all(np.abs(self.p) == 1):
            raise ValidationError("polarity entries must be +1 or -1")

    @classmethod
    def from_events(
        cls,
        events: Iterable[Event],
        geometry: SensorGeometry,
        t_start: float | None = None,
        t_end: float | None = None,
    ) -> "EventWindow":
        recs = list(events)
        t = np.array([e.t for e in recs], dtype=np.float64)
        x = np.array([e.x for e in recs], dtype=np.int32)
        y = np.array([e.y for e in recs], dtype=np.int32)
        p = np.array([e.p for e in recs], dtype=np.int8)
        if t_start is None:
            t_start = float(t[0]) if recs else 0.0
        if t_end is None:
            t_end = float(t[-1]) if recs else float(t_start)
        return cls(t, x, y, p, t_start, t_end, geometry)

    @classmethod
    def empty(cls, geometry: SensorGeometry, t_start: float = 0.0, t_end: float = 0.0) -> "EventWindow":
        z = np.zeros(0)
        return cls(z, z, z, z, t_start, t_end, geometry)

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    @property
    def density(self) -> float:
        """Events per pixel over the window."""
        return len(self) / self.geometry.pixels

    def check_density(self, max_density: float = DEFAULT_MAX_DENSITY):
        if self.density > max_density:
            raise ValidationError(f"window density {self.density:.4f} exceeds cap {max_density}")

    def slice(self, start: int, stop: int) -> "EventWindow":
        """Sub-window over events [start, stop); span tightened to the slice."""
        t = self.t[start:stop]
        ts = float(t[0]) if t.size else self.t_start
        te = float(t[-1]) if t.size else ts
        return EventWindow(t, self.x[start:stop], self.y[start:stop], self.p[start:stop], ts, te, self.geometry)


def parse_events(source: str | bytes | IO, geometry: SensorGeometry | None = None) -> EventWindow:
    """Parse EVT1 text (header ``EVT1 W H``, lines ``t x y p``) into a window.

    When `geometry` is given it must agree with the header. Rejects malformed
    lines, out-of-bounds coordinates, and timestamps that go backwards; the
    raised :class:`EventFormatError` / :class:`GeometryError` names the line.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("ascii")
    lines = source.splitlines()
    header_idx = None
    for i, raw in enumerate(lines):
        if raw.strip():
            header_idx = i
            break
    if header_idx is None:
        raise EventFormatError("missing EVT1 header", line=1)
    header = lines[header_idx].split()
    if len(header) != 3 or header[0] != EVT1_MAGIC:
        raise EventFormatError(f"expected 'EVT1 <W> <H>' header, got {lines[header_idx]!r}", line=header_idx + 1)
    try:
        width, height = int(header[1]), int(header[2])
    except ValueError:
        raise EventFormatError("header dimensions must be integers", line=header_idx + 1) from None
    file_geom = SensorGeometry(width, height)
    if geometry is not None and geometry != file_geom:
        raise GeometryError(f"header geometry {width}x{height} does not match expected {geometry.width}x{geometry.height}")
    geometry = file_geom

    ts: list[float] = []
    xs: list[int] = []
    ys: list[int] = []
    ps: list[int] = []
    prev_t = -math.inf
    for lineno in range(header_idx + 1, len(lines)):
        raw = lines[lineno].strip()
        if not raw:
            continue
        parts = raw.split()
        if len(parts) != 4:
            raise EventFormatError(f"expected 4 fields 't x y p', got {len(parts)}", line=lineno + 1)
        try:
            t = float(parts[0])
            x = int(parts[1])
            y = int(parts[2])
            p = int(parts[3])
        except ValueError:
            raise EventFormatError(f"could not parse event record {raw!r}", line=lineno + 1) from None
        if not math.isfinite(t) or t < 0:
            raise EventFormatError(f"timestamp must be finite and non-negative, got {parts[0]}", line=lineno + 1)
        if p not in (1, -1):
            raise EventFormatError(f"polarity must be 1 or -1, got {p}", line=lineno + 1)
        if not (0 <= x < geometry.width and 0 <= y < geometry.height):
            raise EventFormatError(
                f"coordinate ({x}, {y}) outside {geometry.width}x{geometry.height} sensor", line=lineno + 1
            )
        if t < prev_t:
            raise EventFormatError(f"timestamp {parts[0]} is earlier than its predecessor", line=lineno + 1)
        prev_t = t
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)

    t_start = ts[0] if ts else 0.0
    t_end = ts[-1] if ts else t_start
    return EventWindow(np.array(ts), np.array(xs), np.array(ys), np.array(ps), t_start, t_end, geometry)


def serialize_events(window: EventWindow) -> str:
    """Render a window as EVT1 text; parse(serialize(w)) reproduces w exactly.

    Timestamps use Python's shortest round-trip float rendering.
    """
    out = [f"{EVT1_MAGIC} {window.geometry.width} {window.geometry.height}"]
    for i in range(len(window)):
        out.append(f"{float(window.t[i])!r} {int(window.x[i])} {int(window.y[i])} {int(window.p[i])}")
    return "\n".join(out) + "\n"


def read_evt1(path: str | Path) -> EventWindow:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"event file not found: {path}")
    return parse_events(path.read_text())


def write_evt1(path: str | Path, window: EventWindow):
    Path(path).write_text(serialize_events(window))


@dataclass(frozen=True)
class SimulatorConfig:
    """Log-intensity thresholds of the event simulator.

    `epsilon_log` is added to intensities before the log to keep log(0) out.
    """

    phi_pos: float = 0.2
    phi_neg: float = -0.2
    epsilon_log: float = 1e-3

    def __post_init__(self):
        if not (self.phi_pos > 0 > self.phi_neg):
            raise ValidationError(f"need phi_pos > 0 > phi_neg, got {self.phi_pos}, {self.phi_neg}")
        if self.epsilon_log <= 0:
            raise ValidationError("epsilon_log must be positive")


@dataclass
class FrameSequence:
    """Ordered grayscale frames in [0, 1] with strictly increasing times."""

    frames: np.ndarray  # [N, H, W] float64
    timestamps: np.ndarray  # [N] float64
    geometry: SensorGeometry

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValidationError("frames must be a [N, H, W] array")
        if self.frames.shape[0] != self.timestamps.shape[0]:
            raise ValidationError("frame and timestamp counts differ")
        if self.frames.shape[1:] != self.geometry.shape:
            raise GeometryError(f"frames {self.frames.shape[1:]} do not match geometry {self.geometry.shape}")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise ValidationError("frame values must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.frames.shape[0])


def load_frame_dir(path: str | Path) -> FrameSequence:
    """Read a frame directory: 8-bit grayscale images + `timestamps.txt`.

    Images are taken in lexicographic filename order and mapped to [0, 1]
    by dividing by 255.
    """
    path = Path(path)
    ts_file = path / "timestamps.txt"
    if not path.is_dir() or not ts_file.exists():
        raise MissingArtifactError(f"frame directory with timestamps.txt not found at {path}")
    timestamps = np.array([float(line) for line in ts_file.read_text().split()], dtype=np.float64)
    image_files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".pgm", ".bmp", ".tif", ".tiff"))
    if len(image_files) != timestamps.size:
        raise ValidationError(f"{len(image_files)} images but {timestamps.size} timestamps in {path}")
    frames = []
    geometry = None
    for f in image_files:
        arr = np.asarray(Image.open(f).convert("L"), dtype=np.float64) / 255.0
        if geometry is None:
            geometry = SensorGeometry(arr.shape[1], arr.shape[0])
        frames.append(arr)
    if geometry is None:
        raise ValidationError(f"no images found in {path}")
    return FrameSequence(np.stack(frames), timestamps, geometry)


def save_frame_dir(path: str | Path, seq: FrameSequence):
    """Write frames as zero-padded 8-bit PNGs plus `timestamps.txt`.

    Stale `frame_*.png` files from a previous (longer) run are removed so the
    directory contents are a pure function of the sequence.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for old in path.glob("frame_*.png"):
        old.unlink()
    for i in range(len(seq)):
        img = np.clip(np.round(seq.frames[i] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(path / f"frame_{i:05d}.png")
    (path / "timestamps.txt").write_text("".join(f"{float(t)!r}\n" for t in seq.timestamps))


def simulate_events(frames: FrameSequence, cfg: SimulatorConfig = SimulatorConfig()) -> EventWindow:
    """Threshold-crossing event simulation on a frame sequence.

    Each pixel keeps a log-intensity reference; when the log change since the
    reference reaches a threshold multiple, one event per multiple is emitted
    and the reference advances by exactly the emitted multiples. Timestamps
    sit at the crossing fractions of the inter-frame interval, assuming the
    log intensity ramps linearly between frames.
    """
    if len(frames) < 2:
        raise ValidationError("simulation needs at least 2 frames")
    geom = frames.geometry
    log_ref = np.log(frames.frames[0] + cfg.epsilon_log)
    ts_out: list[np.ndarray] = []
    xs_out: list[np.ndarray] = []
    ys_out: list[np.ndarray] = []
    ps_out: list[np.ndarray] = []

    for k in range(1, len(frames)):
        t0, t1 = frames.timestamps[k - 1], frames.timestamps[k]
        log_cur = np.log(frames.frames[k] + cfg.epsilon_log)
        delta = log_cur - log_ref
        n_pos = np.where(delta >= cfg.phi_pos, np.floor(delta / cfg.phi_pos), 0.0).astype(np.int64)
        n_neg = np.where(delta <= cfg.phi_neg, np.floor(delta / cfg.phi_neg), 0.0).astype(np.int64)

        tt: list[float] = []
        xx: list[int] = []
        yy: list[int] = []
        pp: list[int] = []
        active = np.nonzero(n_pos + n_neg)
        for y, x in zip(*active):
            n = int(n_pos[y, x]) if n_pos[y, x] else int(n_neg[y, x])
            phi = cfg.phi_pos if n_pos[y, x] else cfg.phi_neg
            pol = 1 if n_pos[y, x] else -1
            d = delta[y, x]
            for j in range(1, n + 1):
                frac = j * phi / d  # positive for both polarities
                tt.append(t0 + (t1 - t0) * frac)
                xx.append(int(x))
                yy.append(int(y))
                pp.append(pol)
        if tt:
            order = np.argsort(np.asarray(tt), kind="stable")
            ts_out.append(np.asarray(tt)[order])
            xs_out.append(np.asarray(xx)[order])
            ys_out.append(np.asarray(yy)[order])
            ps_out.append(np.asarray(pp)[order])
        log_ref = log_ref + n_pos * cfg.phi_pos + n_neg * cfg.phi_neg

    if ts_out:
        t = np.concatenate(ts_out)
        x = np.concatenate(xs_out)
        y = np.concatenate(ys_out)
        p = np.concatenate(ps_out)
    else:
        t = x = y = p = np.zeros(0)
    return EventWindow(t, x, y, p, frames.timestamps[0], frames.timestamps[-1], geom)


def segment_by_density(
    events: EventWindow | Sequence[Event],
    geometry: SensorGeometry | None = None,
    max_density: float = DEFAULT_MAX_DENSITY,
) -> list[EventWindow]:
    """Greedy left-to-right cut into windows of at most `max_density` events/pixel.

    Concatenating the output windows reproduces the input exactly; each
    window's span is tightened to its first/last event.
    """
    if max_density <= 0:
        raise ValidationError("max_density must be positive")
    if isinstance(events, EventWindow):
        window = events
        if geometry is not None and geometry != window.geometry:
            raise GeometryError("geometry argument disagrees with the window's geometry")
    else:
        recs = list(events)
        if geometry is None:
            raise ValidationError("geometry is required when passing raw events")
        if any(recs[i].t > recs[i + 1].t for i in range(len(recs) - 1)):
            raise ValidationError("events must be sorted by timestamp")
        window = EventWindow.from_events(recs, geometry)

    cap = int(math.floor(max_density * window.geometry.pixels))
    if cap < 1:
        raise ValidationError(f"density cap {max_density} admits no events on a {window.geometry.pixels}-pixel sensor")
    out = []
    for start in range(0, len(window), cap):
        out.append(window.slice(start, min(start + cap, len(window))))
    return out


@dataclass
class VoxelGrid:
    """Events rasterized into B temporal bins per pixel with bilinear weights."""

    values: np.ndarray  # [B, H, W] float64
    geometry: SensorGeometry
    window: EventWindow | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValidationError("voxel values must be a [B, H, W] array")
        if self.values.shape[1:] != self.geometry.shape:
            raise GeometryError(f"voxel spatial shape {self.values.shape[1:]} does not match geometry {self.geometry.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("voxel grid contains non-finite entries")

    @property
    def bins(self) -> int:
        return int(self.values.shape[0])


def build_voxel_grid(window: EventWindow, bins: int = 5) -> VoxelGrid:
    """Deposit each event's polarity onto at most two adjacent temporal bins.

    The event time is normalized over the window's event span and scaled by
    (bins - 1); weights are the bilinear kernel max(0, 1 - |b - t_norm|).
    A window whose events share one timestamp puts all mass into bin 0.
    """
    if bins < 1:
        raise ValidationError(f"bin count must be >= 1, got {bins}")
    h, w = window.geometry.shape
    values = np.zeros((bins, h, w), dtype=np.float64)
    n = len(window)
    if n == 0:
        return VoxelGrid(values, window.geometry, window)
    span = window.t[-1] - window.t[0]
    if span > 0 and bins > 1:
        t_norm = (window.t - window.t[0]) / span * (bins - 1)
    else:
        t_norm = np.zeros(n)
    b_lo = np.floor(t_norm).astype(np.int64)
    w_hi = t_norm - b_lo
    w_lo = 1.0 - w_hi
    pol = window.p.astype(np.float64)

    np.add.at(values, (b_lo, window.y, window.x), pol * w_lo)
    mask = b_lo + 1 < bins
    np.add.at(values, (b_lo[mask] + 1, window.y[mask], window.x[mask]), pol[mask] * w_hi[mask])
    return VoxelGrid(values, window.geometry, window)


def aggregate_voxel(grid: VoxelGrid) -> np.ndarray:
    """Collapse the temporal bins into one signed event image."""
    return grid.values.sum(axis=0)
