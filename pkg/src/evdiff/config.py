"""Flat key-value run configuration.

Syntax: one `key = value` per line, `#` comments, blank lines ignored. Every
key is declared in the schema below with a type and default; unknown keys
are rejected and every value is validated on parse. Files must carry
`config_version = 1`. Serialization is canonical (schema order, stable float
rendering), so parse(serialize(c)) == c.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .denoiser import DenoiserConfig
from .errors import ValidationError
from .events import SensorGeometry, SimulatorConfig
from .predictor import PredictorConfig
from .scenes import PATTERNS

CONFIG_VERSION = 1


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


@dataclass(frozen=True)
class _Field:
    kind: str  # int | float | bool | str | int_list
    default: Any
    check: Callable[[Any], bool] | None = None
    describe: str = ""


SCHEMA: dict[str, _Field] = {
    "config_version": _Field("int", CONFIG_VERSION, lambda v: v == CONFIG_VERSION, "format version, must be 1"),
    "seed": _Field("int", 0, _non_negative, "master seed for all randomness"),
    "sensor.width": _Field("int", 32, _positive),
    "sensor.height": _Field("int", 32, _positive),
    "scene.pattern": _Field("str", "square", lambda v: v in PATTERNS, "synthetic scene pattern"),
    "scene.frames": _Field("int", 16, _positive),
    "scene.speed": _Field("float", 1.0, None, "pixels per frame"),
    "scene.foreground": _Field("float", 0.85, lambda v: 0.0 <= v <= 1.0),
    "scene.background": _Field("float", 0.3, lambda v: 0.0 <= v <= 1.0),
    "scene.size": _Field("int", 10, _positive),
    "scene.fps": _Field("float", 100.0, _positive),
    "scene.phase": _Field("float", 0.0),
    "sim.phi_pos": _Field("float", 0.2, _positive),
    "sim.phi_neg": _Field("float", -0.2, lambda v: v < 0),
    "sim.epsilon_log": _Field("float", 1e-3, _positive),
    "voxel.bins": _Field("int", 5, _positive),
    "voxel.max_density": _Field("float", 0.25, _positive),
    "voxel.align": _Field("str", "frames", lambda v: v in ("frames", "density")),
    "schedule.steps": _Field("int", 2000, _positive, "diffusion step count"),
    "schedule.beta_start": _Field("float", 1e-4, lambda v: 0 < v < 1),
    "schedule.beta_end": _Field("float", 0.02, lambda v: 0 < v < 1),
    "denoiser.scales": _Field("int", 3, lambda v: v >= 2),
    "denoiser.base_channels": _Field("int", 32, _positive),
    "denoiser.groupnorm_groups": _Field("int", 8, _positive),
    "denoiser.time_embed_dim": _Field("int", 128, lambda v: v >= 2 and v % 2 == 0),
    "denoiser.key_dim": _Field("int", 0, _non_negative, "0 means per-scale channel count"),
    "predictor.base_channels": _Field("int", 12, _positive),
    "train.learning_rate": _Field("float", 2e-3, _positive),
    "train.iterations": _Field("int", 2000, _positive),
    "train.batch": _Field("int", 1, _positive, "frames per optimizer step"),
    "train.truncation": _Field("int", 1, _positive, "frames between recurrent-state detaches"),
    "train.loss_target": _Field("float", 0.0, _non_negative, "early stop on moving average; 0 disables"),
    "train.predictor_learning_rate": _Field("float", 2e-3, _positive),
    "train.predictor_iterations": _Field("int", 400, _positive),
    "train.predictor_truncation": _Field("int", 8, _positive),
    "train.predictor_loss_target": _Field("float", 0.0, _non_negative),
    "ablation.residual": _Field("bool", True, None, "diffuse the temporal residual (off: the frame itself)"),
    "ablation.recurrent": _Field("bool", True, None, "carry the event encoder state across frames"),
    "ablation.cross_att": _Field("bool", True, None, "cross-encoder attention in the noisy path"),
    "ablation.event": _Field("bool", True, None, "feed the event voxels to the denoiser"),
    "infer.steps": _Field("int", 0, _non_negative, "0 means the full schedule"),
    "infer.start_at_final_step": _Field("bool", False),
    "sweep.steps": _Field("int_list", [25, 50, 100], lambda v: len(v) > 0 and all(s > 0 for s in v)),
    "eval.equalize": _Field("bool", True),
    "spectral.cutoff": _Field("float", 0.125, lambda v: 0 < v < 1),
    "io.frames": _Field("str", "", None, "input frame directory override"),
    "io.events": _Field("str", "", None, "input EVT1 file override"),
    "io.voxels": _Field("str", "", None, "input voxel archive override"),
    "io.ref_frames": _Field("str", "", None, "evaluation reference frames override"),
    "io.predictor": _Field("str", "", None, "predictor checkpoint override"),
    "io.denoiser": _Field("str", "", None, "denoiser checkpoint override"),
    "io.samples": _Field("str", "", None, "sampled frame directory override"),
    "io.eval_voxels": _Field("str", "", None, "held-out voxel archive for ablation scoring"),
    "io.eval_frames": _Field("str", "", None, "held-out reference frames for ablation scoring"),
}


def _render(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "int_list":
        return ",".join(str(int(v)) for v in value)
    return str(value)


def _parse_value(kind: str, raw: str, key: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        if kind == "int_list":
            return [int(part) for part in raw.split(",") if part.strip()]
        return raw
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


@dataclass
class PipelineConfig:
    """Validated flat configuration; access values with cfg[key]."""

    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: f.default for k, f in SCHEMA.items()}
        for key, value in self.values.items():
            if key not in SCHEMA:
                raise ValidationError(f"unknown config key {key!r}")
            merged[key] = value
        for key, value in merged.items():
            f = SCHEMA[key]
            ok_type = {
                "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
                "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
                "bool": lambda v: isinstance(v, bool),
                "str": lambda v: isinstance(v, str),
                "int_list": lambda v: isinstance(v, list) and all(isinstance(x, int) for x in v),
            }[f.kind](value)
            if not ok_type:
                raise ValidationError(f"config key {key!r}: expected {f.kind}, got {value!r}")
            if f.kind == "float":
                merged[key] = float(value)
            if f.check is not None and not f.check(merged[key]):
                raise ValidationError(f"config key {key!r}: value {value!r} fails validation")
        if merged["schedule.beta_start"] > merged["schedule.beta_end"]:
            raise ValidationError("schedule.beta_start must not exceed schedule.beta_end")
        if merged["denoiser.base_channels"] % merged["denoiser.groupnorm_groups"] != 0:
            raise ValidationError("denoiser.base_channels must be divisible by denoiser.groupnorm_groups")
        self.values = merged

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **overrides) -> "PipelineConfig":
        """New config with dotted keys overridden (underscores map to dots)."""
        vals = dict(self.values)
        for key, value in overrides.items():
            vals[key.replace("__", ".")] = value
        return PipelineConfig(vals)

    def with_values(self, updates: dict[str, Any]) -> "PipelineConfig":
        vals = dict(self.values)
        vals.update(updates)
        return PipelineConfig(vals)

    def __eq__(self, other):
        return isinstance(other, PipelineConfig) and self.values == other.values

    # Derived sub-configurations -------------------------------------------------

    def sensor_geometry(self) -> SensorGeometry:
        return SensorGeometry(self["sensor.width"], self["sensor.height"])

    def simulator_config(self) -> SimulatorConfig:
        return SimulatorConfig(self["sim.phi_pos"], self["sim.phi_neg"], self["sim.epsilon_log"])

    def denoiser_config(self) -> DenoiserConfig:
        key_dim = self["denoiser.key_dim"]
        scales = self["denoiser.scales"]
        return DenoiserConfig(
            scales=scales,
            base_channels=self["denoiser.base_channels"],
            voxel_bins=self["voxel.bins"],
            key_dims=None if key_dim == 0 else tuple(key_dim for _ in range(scales)),
            groupnorm_groups=self["denoiser.groupnorm_groups"],
            time_embed_dim=self["denoiser.time_embed_dim"],
            cross_attention=self["ablation.cross_att"],
        )

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(voxel_bins=self["voxel.bins"], base_channels=self["predictor.base_channels"])


def serialize_config(cfg: PipelineConfig) -> str:
    lines = ["# evdiff run configuration"]
    for key, f in SCHEMA.items():
        lines.append(f"{key} = {_render(f.kind, cfg[key])}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> PipelineConfig:
    values: dict[str, Any] = {}
    seen_version = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in SCHEMA:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(SCHEMA[key].kind, raw_value, key)
        if key == "config_version":
            seen_version = True
    if not seen_version:
        raise ValidationError("config file must declare config_version")
    return PipelineConfig(values)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    return parse_config(path.read_text())


def default_config() -> PipelineConfig:
    return PipelineConfig({})
