"""Training loop for the conditional denoiser on per-frame voxel/frame pairs.

The intensity predictor is frozen here, mirroring the two-stage setup: its
per-frame outputs are precomputed once (they do not change during diffusion
training) and reused every epoch.
"""

from __future__ import annotations

import numpy as np
import torch

from .diffusion import training_step
from .errors import ValidationError
from .events import FrameSequence, VoxelGrid
from .predictor import predictor_video
from .rng import RngState
from .schedule import NoiseSchedule

LOSS_WINDOW = 25


def train_diffusion_model(
    voxels: list[VoxelGrid],
    frames: FrameSequence,
    predictor,
    model,
    sched: NoiseSchedule,
    rng: RngState,
    *,
    iterations: int = 2000,
    learning_rate: float = 2e-3,
    batch: int = 1,
    truncation: int = 1,
    loss_target: float = 0.0,
    residual_target: bool = True,
    event_condition: bool = True,
    carry_state: bool = True,
) -> list[float]:
    """Optimize `model` in place; returns the per-frame loss history.

    Walks the scene in order with one noise-prediction loss per frame.
    Losses are backpropagated in chunks of `truncation` frames (the
    recurrent state is detached at every chunk boundary; truncation 1 stops
    gradients at each frame, the default), and Adam steps once per `batch`
    chunks. Stops early when the moving average of the last `LOSS_WINDOW`
    losses drops below `loss_target` (0 disables), else after `iterations`
    optimizer steps.
    """
    if len(voxels) != len(frames):
        raise ValidationError(f"{len(voxels)} voxel grids but {len(frames)} frames")
    if len(voxels) < 2:
        raise ValidationError("training needs at least 2 frames")
    if batch < 1 or truncation < 1:
        raise ValidationError("batch and truncation must be >= 1")

    # Frozen predictor: estimates for frames 0..N-2 feed the residual targets.
    prev_estimates = predictor_video(predictor, voxels[:-1])

    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    history: list[float] = []
    steps = 0
    pending_chunks = 0

    while True:
        state = None
        chunk: list[torch.Tensor] = []
        for t in range(1, len(voxels)):
            loss, s_next = training_step(
                frames.frames[t],
                prev_estimates[t - 1],
                voxels[t],
                state if carry_state else None,
                sched,
                model,
                rng,
                residual_target=residual_target,
                event_condition=event_condition,
            )
            history.append(float(loss))
            chunk.append(loss)
            state = s_next

            if len(chunk) >= truncation or t == len(voxels) - 1:
                (torch.stack(chunk).mean() / batch).backward()
                chunk = []
                state = state.detached()
                pending_chunks += 1
                if pending_chunks == batch:
                    opt.step()
                    opt.zero_grad()
                    pending_chunks = 0
                    steps += 1

            hit_target = (
                loss_target > 0
                and len(history) >= LOSS_WINDOW
                and float(np.mean(history[-LOSS_WINDOW:])) < loss_target
            )
            if hit_target or steps >= iterations:
                if pending_chunks:
                    opt.step()
                    opt.zero_grad()
                return history
