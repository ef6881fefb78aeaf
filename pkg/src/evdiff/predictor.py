"""Initial intensity predictor: voxel grids to low-frequency frame estimates.

A deliberately small two-scale recurrent encoder-decoder with a sigmoid
head. It runs once per frame during sampling and only has to get the
low-frequency brightness right; the residual diffusion corrects the rest.
Any object with the same `predict_intensity` signature is a drop-in
replacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .denoiser import ConvLSTMCell, init_parameters
from .errors import GeometryError, ValidationError
from .events import VoxelGrid
from .rng import RngState


@dataclass(frozen=True)
class PredictorConfig:
    voxel_bins: int = 5
    base_channels: int = 12

    def __post_init__(self):
        if self.voxel_bins < 1 or self.base_channels < 1:
            raise ValidationError("voxel_bins and base_channels must be >= 1")


@dataclass
class PredictorState:
    """(hidden, cell) pairs for the two recurrent scales."""

    layers: list[tuple[torch.Tensor, torch.Tensor]]

    def detached(self) -> "PredictorState":
        return PredictorState([(h.detach(), c.detach()) for h, c in self.layers])


class IntensityPredictor(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1 = cfg.base_channels, 2 * cfg.base_channels
        self.stem = nn.Conv2d(cfg.voxel_bins, c0, 3, padding=1)
        self.cell0 = ConvLSTMCell(c0, c0)
        self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.cell1 = ConvLSTMCell(c1, c1)
        self.up = nn.Conv2d(c1, c0, 3, padding=1)
        self.fuse = nn.Conv2d(2 * c0, c0, 3, padding=1)
        self.head = nn.Conv2d(c0, 1, 3, padding=1)

    def predict_intensity(self, voxel: torch.Tensor, state: PredictorState | None):
        """Sigmoid-bounded intensity estimate plus the advanced state."""
        if voxel.ndim != 4 or voxel.shape[1] != self.cfg.voxel_bins:
            raise GeometryError(f"expected [b, {self.cfg.voxel_bins}, H, W] voxel input, got {tuple(voxel.shape)}")
        if voxel.shape[-2] % 2 or voxel.shape[-1] % 2:
            raise GeometryError("spatial size must be even for the two-scale predictor")
        if state is not None and len(state.layers) != 2:
            raise GeometryError("predictor state must carry two scales")
        hc0 = state.layers[0] if state is not None else None
        hc1 = state.layers[1] if state is not None else None

        x = torch.nn.functional.silu(self.stem(voxel))
        h0, c0 = self.cell0(x, hc0)
        x1 = torch.nn.functional.silu(self.down(h0))
        h1, c1 = self.cell1(x1, hc1)
        u = self.up(torch.nn.functional.interpolate(h1, scale_factor=2, mode="nearest"))
        fused = torch.nn.functional.silu(self.fuse(torch.cat([u, h0], dim=1)))
        out = torch.sigmoid(self.head(fused))
        return out, PredictorState([(h0, c0), (h1, c1)])

    forward = predict_intensity


def _voxel_tensor(grid: VoxelGrid, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(grid.values)).to(dtype).unsqueeze(0)


def predictor_video(predictor: IntensityPredictor, voxels, state: PredictorState | None = None) -> np.ndarray:
    """Run the predictor over a voxel sequence; returns [N, H, W] in [0, 1]."""
    dtype = next(predictor.parameters()).dtype
    frames = []
    with torch.no_grad():
        for grid in voxels:
            est, state = predictor.predict_intensity(_voxel_tensor(grid, dtype), state)
            frames.append(est.squeeze(0).squeeze(0).double().numpy())
    return np.stack(frames)


def train_predictor(
    scenes,
    cfg: PredictorConfig,
    rng: RngState,
    *,
    iterations: int = 400,
    learning_rate: float = 2e-3,
    truncation: int = 8,
    loss_target: float = 0.0,
    log_every: int = 1,
):
    """Fit the predictor with mean L1 against ground-truth frames.

    `scenes` is a sequence of (voxel grid list, FrameSequence) pairs with
    aligned lengths. Sequences are unrolled with backprop truncated every
    `truncation` frames; one optimizer step is taken per truncation chunk
    and counts as one iteration. Returns (predictor, loss history).
    """
    scenes = list(scenes)
    if not scenes:
        raise ValidationError("no training scenes given")
    for voxels, frames in scenes:
        if len(voxels) != len(frames):
            raise ValidationError(f"scene has {len(voxels)} voxel grids but {len(frames)} frames")
    if truncation < 1:
        raise ValidationError("truncation must be >= 1")

    model = IntensityPredictor(cfg)
    init_parameters(model, rng.spawn("predictor-init").seed)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    dtype = next(model.parameters()).dtype

    history: list[float] = []
    step = 0
    while step < iterations:
        for voxels, frames in scenes:
            state = None
            t = 0
            while t < len(voxels) and step < iterations:
                chunk_end = min(t + truncation, len(voxels))
                losses = []
                for k in range(t, chunk_end):
                    est, state = model.predict_intensity(_voxel_tensor(voxels[k], dtype), state)
                    target = torch.from_numpy(frames.frames[k]).to(dtype).unsqueeze(0).unsqueeze(0)
                    losses.append((est - target).abs().mean())
                loss = torch.stack(losses).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                state = state.detached()
                history.append(float(loss))
                step += 1
                t = chunk_end
                if loss_target > 0 and len(history) >= 3 and float(np.mean(history[-3:])) < loss_target:
                    return model, history
            if step >= iterations:
                break
    return model, history
