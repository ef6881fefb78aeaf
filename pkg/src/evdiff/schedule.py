"""Noise schedules: beta/alpha tables, posterior variances, strided subsets.

Arrays are stored 0-based; step index tau is 1-based throughout the package,
so position tau - 1 holds the tables for step tau. The cumulative product
convention puts alpha_bar at step 0 equal to 1, which makes the first
posterior variance exactly zero.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray
    taus: np.ndarray  # original 1-based step ids; identity for a full schedule

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma2"):
            arr = getattr(self, name)
            if arr.ndim != 1 or arr.shape[0] != self.beta.shape[0]:
                raise ValidationError(f"schedule field {name} has inconsistent shape")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValidationError("beta entries must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        if np.any(self.sigma2 < 0):
            raise ValidationError("posterior variances must be non-negative")

    @property
    def steps(self) -> int:
        return int(self.beta.shape[0])

    def check_tau(self, tau: int):
        if not 1 <= tau <= self.steps:
            raise ValidationError(f"step index {tau} outside [1, {self.steps}]")

    def alpha_bar_prev(self, tau: int) -> float:
        """alpha_bar at step tau - 1, with the step-0 value defined as 1."""
        self.check_tau(tau)
        return 1.0 if tau == 1 else float(self.alpha_bar[tau - 2])


def make_schedule(
    steps: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    kind: str = "linear",
) -> NoiseSchedule:
    if kind != "linear":
        raise ValidationError(f"unsupported schedule kind {kind!r}")
    if steps < 1:
        raise ValidationError(f"step count must be >= 1, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return _from_beta(beta, np.arange(1, steps + 1, dtype=np.int64))


def _from_beta(beta: np.ndarray, taus: np.ndarray) -> NoiseSchedule:
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma2 = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(beta, alpha, alpha_bar, sigma2, taus)


def strided_schedule(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Sub-schedule over `steps' kept step ids, evenly spread across 1..T.

    The kept steps inherit the original cumulative signal levels; the
    per-step beta and posterior variance are recomputed on the sub-sequence
    so the reverse recursion stays consistent. `taus` records the original
    step ids for conditioning the denoiser.
    """
    if not 1 <= steps <= sched.steps:
        raise ValidationError(f"sub-schedule size {steps} outside [1, {sched.steps}]")
    if steps == sched.steps:
        return sched
    keep = np.unique(np.round(np.linspace(1, sched.steps, steps)).astype(np.int64))
    ab = sched.alpha_bar[keep - 1]
    ab_prev = np.concatenate(([1.0], ab[:-1]))
    beta = 1.0 - ab / ab_prev
    return NoiseSchedule(beta, 1.0 - beta, ab, (1.0 - ab_prev) / (1.0 - ab) * beta, keep)


_CSV_HEADER = "tau,beta,alpha,alpha_bar,sigma2"


def schedule_to_csv(sched: NoiseSchedule) -> str:
    """17-significant-digit CSV; loads back bit-identically."""
    buf = io.StringIO()
    buf.write(_CSV_HEADER + "\n")
    for i in range(sched.steps):
        buf.write(
            f"{sched.taus[i]},{sched.beta[i]:.17g},{sched.alpha[i]:.17g},"
            f"{sched.alpha_bar[i]:.17g},{sched.sigma2[i]:.17g}\n"
        )
    return buf.getvalue()


def schedule_from_csv(text: str) -> NoiseSchedule:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != _CSV_HEADER:
        raise ValidationError(f"expected schedule CSV header {_CSV_HEADER!r}")
    rows = [ln.split(",") for ln in lines[1:]]
    if any(len(r) != 5 for r in rows):
        raise ValidationError("schedule CSV rows must have 5 columns")
    taus = np.array([int(r[0]) for r in rows], dtype=np.int64)
    beta = np.array([float(r[1]) for r in rows])
    alpha = np.array([float(r[2]) for r in rows])
    alpha_bar = np.array([float(r[3]) for r in rows])
    sigma2 = np.array([float(r[4]) for r in rows])
    return NoiseSchedule(beta, alpha, alpha_bar, sigma2, taus)


def save_schedule(path: str | Path, sched: NoiseSchedule):
    Path(path).write_text(schedule_to_csv(sched))


def load_schedule(path: str | Path) -> NoiseSchedule:
    return schedule_from_csv(Path(path).read_text())
