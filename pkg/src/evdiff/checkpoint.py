"""Model checkpoints on top of the array container.

A checkpoint stores the state dict as named arrays plus an echo of the
builder config; loading validates the format tag and (optionally) that the
echo matches what the caller is about to run with.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from .arraystore import load_arrays, save_arrays
from .denoiser import DenoiserConfig, NoisePredictor
from .errors import CheckpointMismatchError
from .predictor import IntensityPredictor, PredictorConfig

PREDICTOR_TAG = "evdiff-predictor"
DENOISER_TAG = "evdiff-denoiser"


def _config_echo(cfg) -> dict:
    echo = dataclasses.asdict(cfg)
    if echo.get("key_dims") is not None:
        echo["key_dims"] = list(echo["key_dims"])
    return echo


def save_model(path: str | Path, model: torch.nn.Module, tag: str, cfg):
    params = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    save_arrays(path, tag, params, {"config": _config_echo(cfg)})


def _load_into(model: torch.nn.Module, params: dict) -> torch.nn.Module:
    state = {name: torch.from_numpy(arr) for name, arr in params.items()}
    model.load_state_dict(state)
    return model


def load_denoiser(path: str | Path, expect: DenoiserConfig | None = None) -> NoisePredictor:
    params, meta = load_arrays(path, expect_tag=DENOISER_TAG)
    echo = dict(meta["config"])
    if echo.get("key_dims") is not None:
        echo["key_dims"] = tuple(echo["key_dims"])
    cfg = DenoiserConfig(**echo)
    if expect is not None and cfg != expect:
        raise CheckpointMismatchError(f"denoiser checkpoint config {cfg} does not match requested {expect}")
    return _load_into(NoisePredictor(cfg), params)


def load_predictor(path: str | Path, expect: PredictorConfig | None = None) -> IntensityPredictor:
    params, meta = load_arrays(path, expect_tag=PREDICTOR_TAG)
    cfg = PredictorConfig(**meta["config"])
    if expect is not None and cfg != expect:
        raise CheckpointMismatchError(f"predictor checkpoint config {cfg} does not match requested {expect}")
    return _load_into(IntensityPredictor(cfg), params)
