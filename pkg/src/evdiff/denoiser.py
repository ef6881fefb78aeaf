"""Triple-path conditional noise predictor.

Three encoders feed a shared bottleneck: a plain multi-scale conv encoder on
the previous intensity estimate, a multi-scale ConvLSTM encoder that
accumulates event voxels across frames, and an encoder on the concatenated
noisy residual + voxel input whose upper scales attend across the other two
paths (queries from event features, keys from intensity features, values
from the noisy path). The decoder consumes noisy-path skips with nearest
upsampling and emits the noise estimate at full resolution. The recurrent
state depends only on the voxel input and the prior state, never on the
noisy image or the step index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import GeometryError, ValidationError
from .rng import parameter_rng


@dataclass(frozen=True)
class DenoiserConfig:
    scales: int = 3
    base_channels: int = 32
    voxel_bins: int = 5
    key_dims: tuple[int, ...] | None = None  # per-scale attention dim; None -> channel count
    groupnorm_groups: int = 8
    time_embed_dim: int = 128
    cross_attention: bool = True

    def __post_init__(self):
        if self.scales < 2:
            raise ValidationError(f"need at least 2 scales, got {self.scales}")
        if self.base_channels < 1 or self.base_channels % self.groupnorm_groups != 0:
            raise ValidationError(
                f"base_channels {self.base_channels} must be a positive multiple of groupnorm_groups {self.groupnorm_groups}"
            )
        if self.voxel_bins < 1:
            raise ValidationError("voxel_bins must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ValidationError("time_embed_dim must be an even integer >= 2")
        if self.key_dims is not None:
            if len(self.key_dims) != self.scales:
                raise ValidationError("key_dims must list one entry per scale")
            if any(d < 1 for d in self.key_dims):
                raise ValidationError("key_dims entries must be >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * (2**level)

    def key_dim(self, level: int) -> int:
        if self.key_dims is None:
            return self.channels(level)
        return self.key_dims[level]


@dataclass
class RecurrentState:
    """Per-scale (hidden, cell) images of the recurrent event encoder."""

    layers: list[tuple[torch.Tensor, torch.Tensor]]

    def detached(self) -> "RecurrentState":
        return RecurrentState([(h.detach(), c.detach()) for h, c in self.layers])


def sinusoidal_time_embedding(tau, dim: int) -> torch.Tensor:
    """Fixed sin/cos features of the (1-based) diffusion step."""
    if isinstance(tau, int):
        tau = torch.tensor([float(tau)])
    tau = tau.float()
    half = dim // 2
    exponents = torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    freqs = torch.exp(-math.log(10000.0) * exponents)
    args = tau[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    """Sinusoidal step features followed by a small learned projection."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, tau) -> torch.Tensor:
        if isinstance(tau, int) and tau < 1:
            raise ValidationError(f"step index must be >= 1, got {tau}")
        emb = sinusoidal_time_embedding(tau, self.dim)
        return self.proj(emb.to(next(self.parameters()).dtype))


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM gates over 3x3 neighborhoods."""

    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, hc: tuple[torch.Tensor, torch.Tensor] | None):
        b, _, height, width = x.shape
        if hc is None:
            h = x.new_zeros(b, self.hidden_channels, height, width)
            c = x.new_zeros(b, self.hidden_channels, height, width)
        else:
            h, c = hc
            if h.shape[-2:] != x.shape[-2:] or h.shape[1] != self.hidden_channels:
                raise GeometryError(
                    f"recurrent state {tuple(h.shape)} incompatible with input {tuple(x.shape)}"
                )
        gates = self.gates(torch.cat([x, h], dim=1))
        i, f, o, g = torch.chunk(gates, 4, dim=1)
        c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_next = torch.sigmoid(o) * torch.tanh(c_next)
        return h_next, c_next


class ConvBlock(nn.Module):
    """Two 3x3 convs with group norm and SiLU; downsampling lives outside."""

    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_channels)

    def forward(self, x):
        x = torch.nn.functional.silu(self.norm1(self.conv1(x)))
        return torch.nn.functional.silu(self.norm2(self.conv2(x)))


class ResidualBlock(nn.Module):
    """GN/SiLU/conv twice with an additive step embedding and a skip path."""

    def __init__(self, in_channels: int, out_channels: int, groups: int, time_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb_proj = nn.Linear(time_dim, out_channels) if time_dim else None
        self.norm2 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial-token attention across encoders, added residually.

    Queries come from the event features, keys from the intensity features,
    values from the noisy path; all projections are bias-free 1x1 convs.
    """

    def __init__(self, event_channels: int, intensity_channels: int, value_channels: int, key_dim: int):
        super().__init__()
        self.key_dim = key_dim
        self.to_q = nn.Conv2d(event_channels, key_dim, 1, bias=False)
        self.to_k = nn.Conv2d(intensity_channels, key_dim, 1, bias=False)
        self.to_v = nn.Conv2d(value_channels, value_channels, 1, bias=False)

    def forward(self, f_event, f_intensity, f_noisy):
        if f_event.shape[-2:] != f_noisy.shape[-2:] or f_intensity.shape[-2:] != f_noisy.shape[-2:]:
            raise GeometryError("cross-attention inputs must share spatial size")
        b, c, h, w = f_noisy.shape
        q = self.to_q(f_event).reshape(b, self.key_dim, h * w).transpose(1, 2)
        k = self.to_k(f_intensity).reshape(b, self.key_dim, h * w)
        v = self.to_v(f_noisy).reshape(b, c, h * w).transpose(1, 2)
        att = torch.softmax(q @ k / math.sqrt(self.key_dim), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, c, h, w)
        return f_noisy + out


class SelfAttention(nn.Module):
    """Single-head spatial self-attention with a residual add."""

    def __init__(self, channels: int, key_dim: int, groups: int):
        super().__init__()
        self.key_dim = key_dim
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Conv2d(channels, key_dim, 1, bias=False)
        self.to_k = nn.Conv2d(channels, key_dim, 1, bias=False)
        self.to_v = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x):
        b, c, h, w = x.shape
        n = self.norm(x)
        q = self.to_q(n).reshape(b, self.key_dim, h * w).transpose(1, 2)
        k = self.to_k(n).reshape(b, self.key_dim, h * w)
        v = self.to_v(n).reshape(b, c, h * w).transpose(1, 2)
        att = torch.softmax(q @ k / math.sqrt(self.key_dim), dim=-1)
        return x + (att @ v).transpose(1, 2).reshape(b, c, h, w)


class IntensityEncoder(nn.Module):
    """Multi-scale conv features of the previous intensity estimate."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        in_ch = 1
        for level in range(cfg.scales):
            out_ch = cfg.channels(level)
            self.blocks.append(ConvBlock(in_ch, out_ch, cfg.groupnorm_groups))
            if level < cfg.scales - 1:
                self.downs.append(nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1))
            in_ch = out_ch

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        if img.ndim != 4 or img.shape[1] != 1:
            raise GeometryError(f"expected [b, 1, H, W] intensity input, got {tuple(img.shape)}")
        _check_divisible(img.shape[-2:], self.cfg.scales)
        feats = []
        h = img
        for level, block in enumerate(self.blocks):
            h = block(h)
            feats.append(h)
            if level < len(self.downs):
                h = self.downs[level](h)
        return feats


class RecurrentEventEncoder(nn.Module):
    """Multi-scale ConvLSTM over voxel grids; carries state across frames."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(cfg.voxel_bins, cfg.channels(0), 3, padding=1)
        self.cells = nn.ModuleList(
            ConvLSTMCell(cfg.channels(level), cfg.channels(level)) for level in range(cfg.scales)
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(cfg.channels(level), cfg.channels(level + 1), 3, stride=2, padding=1)
            for level in range(cfg.scales - 1)
        )

    def forward(self, voxel: torch.Tensor, state: RecurrentState | None):
        if voxel.ndim != 4 or voxel.shape[1] != self.cfg.voxel_bins:
            raise GeometryError(f"expected [b, {self.cfg.voxel_bins}, H, W] voxel input, got {tuple(voxel.shape)}")
        _check_divisible(voxel.shape[-2:], self.cfg.scales)
        if state is not None and len(state.layers) != self.cfg.scales:
            raise GeometryError(f"state has {len(state.layers)} scales, expected {self.cfg.scales}")
        feats = []
        new_layers = []
        x = self.stem(voxel)
        for level in range(self.cfg.scales):
            hc = state.layers[level] if state is not None else None
            h, c = self.cells[level](x, hc)
            feats.append(h)
            new_layers.append((h, c))
            if level < self.cfg.scales - 1:
                x = self.downs[level](h)
        return feats, RecurrentState(new_layers)


class NoisyResidualEncoder(nn.Module):
    """Encoder on [x_tau || voxel] whose upper scales attend across paths."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(1 + cfg.voxel_bins, cfg.channels(0), 3, padding=1)
        self.blocks = nn.ModuleList(
            ResidualBlock(cfg.channels(level), cfg.channels(level), cfg.groupnorm_groups, cfg.time_embed_dim)
            for level in range(cfg.scales)
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(cfg.channels(level), cfg.channels(level + 1), 3, stride=2, padding=1)
            for level in range(cfg.scales - 1)
        )
        if cfg.cross_attention:
            self.attns = nn.ModuleList(
                CrossAttention(cfg.channels(level), cfg.channels(level), cfg.channels(level), cfg.key_dim(level))
                for level in range(1, cfg.scales)
            )
        else:
            self.attns = None

    def forward(self, x_tau, voxel, f_event, f_intensity, temb) -> list[torch.Tensor]:
        if x_tau.shape[-2:] != voxel.shape[-2:]:
            raise GeometryError("noisy image and voxel grid must share spatial size")
        if len(f_event) != self.cfg.scales or len(f_intensity) != self.cfg.scales:
            raise GeometryError("condition pyramids must have one level per scale")
        h = self.stem(torch.cat([x_tau, voxel], dim=1))
        feats = []
        for level in range(self.cfg.scales):
            if level > 0:
                h = self.downs[level - 1](h)
            h = self.blocks[level](h, temb)
            if level >= 1 and self.attns is not None:
                h = self.attns[level - 1](f_event[level], f_intensity[level], h)
            feats.append(h)
        return feats


class NoisePredictor(nn.Module):
    """The full conditional denoiser; see module docstring for the layout."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.time_embed = TimeEmbedding(cfg.time_embed_dim)
        self.intensity_encoder = IntensityEncoder(cfg)
        self.event_encoder = RecurrentEventEncoder(cfg)
        self.noisy_encoder = NoisyResidualEncoder(cfg)

        top = cfg.channels(cfg.scales - 1)
        self.fuse = nn.Conv2d(3 * top, top, 3, padding=1)
        self.mid_block1 = ResidualBlock(top, top, cfg.groupnorm_groups, cfg.time_embed_dim)
        self.mid_attn = SelfAttention(top, cfg.key_dim(cfg.scales - 1), cfg.groupnorm_groups)
        self.mid_block2 = ResidualBlock(top, top, cfg.groupnorm_groups, cfg.time_embed_dim)

        self.dec_blocks = nn.ModuleList(
            ResidualBlock(2 * cfg.channels(level), cfg.channels(level), cfg.groupnorm_groups, cfg.time_embed_dim)
            for level in range(cfg.scales)
        )
        self.ups = nn.ModuleList(
            nn.Conv2d(cfg.channels(level), cfg.channels(level - 1), 3, padding=1)
            for level in range(1, cfg.scales)
        )
        self.head_norm = nn.GroupNorm(cfg.groupnorm_groups, cfg.channels(0))
        self.head = nn.Conv2d(cfg.channels(0), 1, 3, padding=1)

    def encode_conditions(self, voxel, i_est_prev, state: RecurrentState | None):
        """Run the two condition encoders once per frame.

        The returned state comes from the event encoder alone, so it is
        independent of the noisy input and the step index.
        """
        if voxel.shape[-2:] != i_est_prev.shape[-2:]:
            raise GeometryError("voxel grid and intensity estimate must share spatial size")
        f_intensity = self.intensity_encoder(i_est_prev)
        f_event, s_next = self.event_encoder(voxel, state)
        return (f_event, f_intensity), s_next

    def denoise_from_conditions(self, x_tau, voxel, cond, tau: int) -> torch.Tensor:
        f_event, f_intensity = cond
        if x_tau.ndim != 4 or x_tau.shape[1] != 1:
            raise GeometryError(f"expected [b, 1, H, W] noisy input, got {tuple(x_tau.shape)}")
        temb = self.time_embed(tau)
        f_noisy = self.noisy_encoder(x_tau, voxel, f_event, f_intensity, temb)

        h = self.fuse(torch.cat([f_event[-1], f_intensity[-1], f_noisy[-1]], dim=1))
        h = self.mid_block1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        for level in range(self.cfg.scales - 1, -1, -1):
            h = self.dec_blocks[level](torch.cat([h, f_noisy[level]], dim=1), temb)
            if level > 0:
                h = self.ups[level - 1](torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest"))
        return self.head(torch.nn.functional.silu(self.head_norm(h)))

    def predict_noise(self, x_tau, voxel, i_est_prev, state: RecurrentState | None, tau: int):
        """Full forward pass: (noise estimate, advanced recurrent state)."""
        cond, s_next = self.encode_conditions(voxel, i_est_prev, state)
        return self.denoise_from_conditions(x_tau, voxel, cond, tau), s_next

    forward = predict_noise


def _check_divisible(spatial, scales: int):
    div = 2 ** (scales - 1)
    h, w = int(spatial[0]), int(spatial[1])
    if h % div or w % div:
        raise GeometryError(f"spatial size {h}x{w} must be divisible by {div} for {scales} scales")


def init_parameters(model: nn.Module, seed: int):
    """Deterministic fan-in-scaled init, keyed per module name.

    Conv/linear weights draw uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) from a
    per-name stream; biases start at zero and norm layers at identity. Two
    models sharing module names share those modules' initial values, which
    the exact-ablation checks rely on.
    """
    with torch.no_grad():
        for name, mod in model.named_modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                w = mod.weight
                fan_in = int(np.prod(w.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                vals = parameter_rng(seed, name).uniform(-bound, bound, size=tuple(w.shape))
                w.copy_(torch.from_numpy(vals).to(w.dtype))
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.GroupNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    return model
