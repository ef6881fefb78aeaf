"""Temporal-residual diffusion: targets, noising arithmetic, training, sampling.

The scalar/array arithmetic lives in plain numpy (float64) so it is easy to
test against hand-evaluated values; the neural denoiser and intensity
predictor are consumed through small duck-typed interfaces
(`predict_noise` / `encode_conditions` / `predict_intensity`), which keeps
stub models trivial to write in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import GeometryError, ValidationError
from .events import VoxelGrid
from .rng import RngState
from .schedule import NoiseSchedule


@dataclass
class IntensityImage:
    """Grayscale image in [0, 1] with an associated capture time."""

    values: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("intensity image must be 2-D")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValidationError("intensity values must lie in [0, 1]")


@dataclass
class ResidualImage:
    """Frame-to-frame intensity difference; nominal range [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("residual image must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("residual image contains non-finite entries")


def image_values(img) -> np.ndarray:
    """Accept a bare array or one of the image wrappers."""
    if isinstance(img, (IntensityImage, ResidualImage)):
        return img.values
    return np.asarray(img, dtype=np.float64)


def compute_residual_target(i_t, i_est_prev) -> ResidualImage:
    """Elementwise difference between the true frame and the prior estimate."""
    a = image_values(i_t)
    b = image_values(i_est_prev)
    if a.shape != b.shape:
        raise GeometryError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return ResidualImage(a - b)


def diffuse(x0, tau: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Jump straight to step tau: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    sched.check_tau(tau)
    x0 = image_values(x0)
    eps = image_values(eps)
    if x0.shape != eps.shape:
        raise GeometryError(f"noise shape {eps.shape} does not match data {x0.shape}")
    ab = sched.alpha_bar[tau - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def diffuse_step(x_prev, tau: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Single forward step: sqrt(1-beta)*x + sqrt(beta)*eps."""
    sched.check_tau(tau)
    x_prev = image_values(x_prev)
    eps = image_values(eps)
    if x_prev.shape != eps.shape:
        raise GeometryError(f"noise shape {eps.shape} does not match data {x_prev.shape}")
    b = sched.beta[tau - 1]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps


def posterior_mean(x_tau, eps_pred, tau: int, sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean from a noise prediction."""
    sched.check_tau(tau)
    x_tau = image_values(x_tau)
    eps_pred = image_values(eps_pred)
    if x_tau.shape != eps_pred.shape:
        raise GeometryError(f"prediction shape {eps_pred.shape} does not match data {x_tau.shape}")
    a = sched.alpha[tau - 1]
    b = sched.beta[tau - 1]
    ab = sched.alpha_bar[tau - 1]
    return (x_tau - b / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)


def analytic_posterior_mean(x_tau, x0, tau: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact forward-process posterior mean given the clean image.

    Test oracle for `posterior_mean`: feeding the exact noise used by
    `diffuse` into `posterior_mean` must reproduce this value.
    """
    sched.check_tau(tau)
    x_tau = image_values(x_tau)
    x0 = image_values(x0)
    if x_tau.shape != x0.shape:
        raise GeometryError(f"shapes differ: {x_tau.shape} vs {x0.shape}")
    b = sched.beta[tau - 1]
    a = sched.alpha[tau - 1]
    ab = sched.alpha_bar[tau - 1]
    ab_prev = sched.alpha_bar_prev(tau)
    coef0 = np.sqrt(ab_prev) * b / (1.0 - ab)
    coef_t = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    return coef0 * x0 + coef_t * x_tau


def sample_step(x_tau, eps_pred, tau: int, z, sched: NoiseSchedule) -> np.ndarray:
    """One reverse transition: posterior mean plus sqrt(sigma2)*z.

    Pass z = None (or zeros) at tau = 1; sigma2 there is exactly zero, so the
    mean is returned either way.
    """
    mu = posterior_mean(x_tau, eps_pred, tau, sched)
    if z is None:
        return mu
    z = image_values(z)
    if z.shape != mu.shape:
        raise GeometryError(f"z shape {z.shape} does not match data {mu.shape}")
    return mu + np.sqrt(sched.sigma2[tau - 1]) * z


def _model_dtype(model) -> torch.dtype:
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float32


def as_image_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """[H, W] array -> [1, 1, H, W] tensor."""
    arr = image_values(img)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).unsqueeze(0).unsqueeze(0)


def as_voxel_tensor(grid: VoxelGrid | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """[B, H, W] voxel values -> [1, B, H, W] tensor."""
    arr = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).unsqueeze(0)


def training_step(
    i_t,
    i_est_prev,
    v_t: VoxelGrid,
    s_prev,
    sched: NoiseSchedule,
    model,
    rng: RngState,
    *,
    residual_target: bool = True,
    event_condition: bool = True,
):
    """One frame's denoising objective; returns (loss, advanced state).

    Draws tau uniformly from {1, ..., T} and standard-normal noise from
    `rng`, noises the residual target, and scores the model's noise
    prediction with a mean L1. The returned loss is a torch scalar carrying
    the autograd graph, so the parameter update stays with the caller.
    With `residual_target=False` the diffusion target is the intensity frame
    itself; with `event_condition=False` the model sees a zeroed voxel grid.
    """
    i_t = image_values(i_t)
    i_prev = image_values(i_est_prev)
    if i_t.shape != i_prev.shape:
        raise GeometryError(f"frame shapes differ: {i_t.shape} vs {i_prev.shape}")
    if i_t.shape != v_t.geometry.shape:
        raise GeometryError(f"frame shape {i_t.shape} does not match voxel geometry {v_t.geometry.shape}")

    x0 = (i_t - i_prev) if residual_target else i_t
    tau = rng.integers(1, sched.steps)
    eps = rng.normal(x0.shape)
    x_tau = diffuse(x0, tau, eps, sched)

    dtype = _model_dtype(model)
    v_values = v_t.values if event_condition else np.zeros_like(v_t.values)
    eps_pred, s_next = model.predict_noise(
        as_image_tensor(x_tau, dtype),
        as_voxel_tensor(v_values, dtype),
        as_image_tensor(i_prev, dtype),
        s_prev,
        int(sched.taus[tau - 1]),
    )
    target = as_image_tensor(eps, dtype)
    loss = (target - eps_pred).abs().mean()
    return loss, s_next


def denoise_to_residual(
    x_init: np.ndarray,
    eps_fn,
    sched: NoiseSchedule,
    rng: RngState,
    *,
    start_at_final_step: bool = False,
) -> np.ndarray:
    """Run the reverse chain on one frame; `eps_fn(x, pos, tau)` predicts noise.

    By default the loop starts at position T - 1 (the initial draw stands in
    for the state at the final step); `start_at_final_step=True` begins at T
    instead. z is drawn per step and forced to zero at position 1.
    """
    x = np.asarray(x_init, dtype=np.float64)
    first = sched.steps if start_at_final_step else sched.steps - 1
    for pos in range(first, 0, -1):
        eps_pred = eps_fn(x, pos, int(sched.taus[pos - 1]))
        z = rng.normal(x.shape) if pos > 1 else None
        x = sample_step(x, eps_pred, pos, z, sched)
    return x


def sample_sequence(
    voxels: Sequence[VoxelGrid],
    predictor,
    model,
    sched: NoiseSchedule,
    rng: RngState,
    *,
    start_at_final_step: bool = False,
    residual_target: bool = True,
    event_condition: bool = True,
    carry_state: bool = True,
) -> np.ndarray:
    """Reconstruct a video from per-frame voxel grids.

    Frame 0 is the intensity predictor's output; every later frame adds a
    denoised residual to the previous frame's predictor estimate and clamps
    to [0, 1]. The predictor consumes each voxel grid once (the last one is
    never needed), and the denoiser's recurrent state advances once per
    frame. Ablation switches mirror `training_step`; `carry_state=False`
    resets the recurrent state at every frame.
    """
    voxels = list(voxels)
    if not voxels:
        raise ValidationError("voxel sequence is empty")
    geometry = voxels[0].geometry
    if any(g.geometry != geometry for g in voxels):
        raise GeometryError("voxel grids disagree on sensor geometry")
    shape = geometry.shape
    dtype = _model_dtype(model)
    p_dtype = _model_dtype(predictor)

    frames = []
    pstate = None
    dstate = None
    prev_est: np.ndarray | None = None

    with torch.no_grad():
        for t, grid in enumerate(voxels):
            if t == 0:
                est_t, pstate = predictor.predict_intensity(as_voxel_tensor(grid, p_dtype), pstate)
                prev_est = est_t.squeeze(0).squeeze(0).double().numpy()
                frames.append(prev_est)
                continue

            v_values = grid.values if event_condition else np.zeros_like(grid.values)
            v_t = as_voxel_tensor(v_values, dtype)
            i_prev_t = as_image_tensor(np.clip(prev_est, 0.0, 1.0), dtype)
            cond, s_next = model.encode_conditions(v_t, i_prev_t, dstate if carry_state else None)

            def eps_fn(x, pos, tau):
                pred = model.denoise_from_conditions(as_image_tensor(x, dtype), v_t, cond, tau)
                return pred.squeeze(0).squeeze(0).double().numpy()

            x0 = denoise_to_residual(
                rng.normal(shape), eps_fn, sched, rng, start_at_final_step=start_at_final_step
            )
            frame = prev_est + x0 if residual_target else x0
            frames.append(np.clip(frame, 0.0, 1.0))
            if carry_state:
                dstate = s_next.detached() if s_next is not None else None

            if t + 1 < len(voxels):
                est_t, pstate = predictor.predict_intensity(as_voxel_tensor(grid, p_dtype), pstate)
                prev_est = est_t.squeeze(0).squeeze(0).double().numpy()

    return np.stack(frames)
