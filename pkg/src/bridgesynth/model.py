"""
Noise-prediction UNet eps_theta(X_t^i, Y^i, S_style, t).

The x_t and y sub-volumes (2N+1 slices each) are concatenated along channels.
The time step goes through a sinusoidal embedding and an MLP; the flattened
style key goes through its own MLP and is added to the time embedding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from bridgesynth.stylekey import StyleKey
from bridgesynth.volume import SubVolume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserSpec:
    image_size: int = 64
    in_channels: int = 6
    out_channels: int = 3
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2, 4)
    res_blocks_per_level: int = 2
    attention_resolutions: Tuple[int, ...] = (16, 8)
    attention_heads: int = 4
    time_embed_width: Optional[int] = None  # defaults to 4 * base_channels
    style_hists: int = 3
    style_bins: int = 256
    style_hidden: int = 256

    @classmethod
    def full_scale(cls) -> "DenoiserSpec":
        return cls(image_size=256, in_channels=6, out_channels=3, base_channels=128,
                   channel_multipliers=(1, 4, 8), res_blocks_per_level=2,
                   attention_resolutions=(32, 16, 8), attention_heads=8)

    @classmethod
    def desk(cls, **overrides) -> "DenoiserSpec":
        return cls(**overrides)

    @property
    def N(self) -> int:
        return (self.out_channels - 1) // 2

    @property
    def temb(self) -> int:
        return self.time_embed_width or 4 * self.base_channels

    def validate(self) -> None:
        if self.in_channels != 2 * self.out_channels:
            raise ValueError(f"in_channels ({self.in_channels}) must equal 2 * out_channels ({self.out_channels})")
        if self.out_channels % 2 != 1:
            raise ValueError("out_channels must be odd (2N+1 slices)")
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must not be empty")
        factor = 2 ** (len(self.channel_multipliers) - 1)
        if self.image_size % factor:
            raise ValueError(f"image_size {self.image_size} not divisible by downsampling factor {factor}")
        if self.base_channels < 1 or self.res_blocks_per_level < 1 or self.attention_heads < 1:
            raise ValueError("base_channels, res_blocks_per_level and attention_heads must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        d["attention_resolutions"] = tuple(d["attention_resolutions"])
        return cls(**d)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, ch), ch)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, emb_dim: int):
        super().__init__()
        self.in_layers = nn.Sequential(_norm(ch_in), nn.SiLU(), nn.Conv2d(ch_in, ch_out, 3, padding=1))
        self.emb_layers = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, ch_out))
        self.out_layers = nn.Sequential(_norm(ch_out), nn.SiLU(), nn.Conv2d(ch_out, ch_out, 3, padding=1))
        self.skip = nn.Identity() if ch_in == ch_out else nn.Conv2d(ch_in, ch_out, 1)

    def forward(self, x, emb):
        h = self.in_layers(x)
        h = h + self.emb_layers(emb)[:, :, None, None]
        h = self.out_layers(h)
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, ch: int, heads: int):
        super().__init__()
        while ch % heads:
            heads -= 1
        self.heads = heads
        self.norm = _norm(ch)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = nn.Conv1d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x).reshape(b, c, h * w))
        q, k, v = qkv.reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        scale = 1.0 / math.sqrt(c // self.heads)
        attn = torch.softmax(torch.einsum("bhct,bhcs->bhts", q * scale, k), dim=-1)
        out = torch.einsum("bhts,bhcs->bhct", attn, v).reshape(b, c, h * w)
        return x + self.proj(out).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.op = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.op(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        base, temb = spec.base_channels, spec.temb
        self.time_embed = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.style_embed = nn.Sequential(nn.Linear(spec.style_hists * spec.style_bins, spec.style_hidden), nn.SiLU(),
                                         nn.Linear(spec.style_hidden, temb))
        attn_at = set(spec.attention_resolutions)

        self.input_conv = nn.Conv2d(spec.in_channels, base, 3, padding=1)
        self.down = nn.ModuleList()
        skip_chs = [base]
        ch, res = base, spec.image_size
        for level, mult in enumerate(spec.channel_multipliers):
            for _ in range(spec.res_blocks_per_level):
                layers = [ResBlock(ch, base * mult, temb)]
                ch = base * mult
                if res in attn_at:
                    layers.append(AttentionBlock(ch, spec.attention_heads))
                self.down.append(nn.ModuleList(layers))
                skip_chs.append(ch)
            if level != len(spec.channel_multipliers) - 1:
                self.down.append(nn.ModuleList([Downsample(ch)]))
                skip_chs.append(ch)
                res //= 2

        self.mid = nn.ModuleList([ResBlock(ch, ch, temb), AttentionBlock(ch, spec.attention_heads),
                                  ResBlock(ch, ch, temb)])

        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(spec.channel_multipliers))):
            for i in range(spec.res_blocks_per_level + 1):
                layers = [ResBlock(ch + skip_chs.pop(), base * mult, temb)]
                ch = base * mult
                if res in attn_at:
                    layers.append(AttentionBlock(ch, spec.attention_heads))
                if level and i == spec.res_blocks_per_level:
                    layers.append(Upsample(ch))
                    res *= 2
                self.up.append(nn.ModuleList(layers))

        self.out = nn.Sequential(_norm(ch), nn.SiLU(), nn.Conv2d(ch, spec.out_channels, 3, padding=1))

    def forward(self, x_t: torch.Tensor, y: torch.Tensor, style: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        dtype = self.input_conv.weight.dtype
        emb = self.time_embed(timestep_embedding(t, self.spec.base_channels).to(dtype))
        emb = emb + self.style_embed(style.to(dtype))
        h = self.input_conv(torch.cat([x_t, y], dim=1).to(dtype))
        hs = [h]
        for layers in self.down:
            for layer in layers:
                h = layer(h, emb) if isinstance(layer, ResBlock) else layer(h)
            hs.append(h)
        for layer in self.mid:
            h = layer(h, emb) if isinstance(layer, ResBlock) else layer(h)
        for layers in self.up:
            h = torch.cat([h, hs.pop()], dim=1)
            for layer in layers:
                h = layer(h, emb) if isinstance(layer, ResBlock) else layer(h)
        return self.out(h)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class Denoiser:
    """
    Inference wrapper around :class:`UNet` with a numpy interface.

    ``denoiser(x_sub, y_sub, key, t)`` takes batched windows of shape
    (B, 2N+1, H, W) and returns noise estimates of the same shape.
    """

    def __init__(self, net: UNet, batch_size: int = 16):
        self.net = net
        self.spec = net.spec
        self.batch_size = batch_size

    @property
    def N(self) -> int:
        return self.spec.N

    def __call__(self, x_sub, y_sub, key: StyleKey, t: int, centers=None) -> np.ndarray:
        x_sub, y_sub = np.asarray(x_sub), np.asarray(y_sub)
        if x_sub.shape != y_sub.shape:
            raise ValueError(f"shape mismatch: x_t windows {x_sub.shape} vs y windows {y_sub.shape}")
        if x_sub.ndim != 4 or x_sub.shape[1] != self.spec.out_channels:
            raise ValueError(f"expected windows of shape (B, {self.spec.out_channels}, H, W), got {x_sub.shape}")
        dtype = self.net.input_conv.weight.dtype
        style = torch.tensor(key.flat(), dtype=dtype)[None]
        was_training = self.net.training
        self.net.eval()
        outs = []
        with torch.no_grad():
            for s in range(0, x_sub.shape[0], self.batch_size):
                xb = torch.as_tensor(x_sub[s:s + self.batch_size], dtype=dtype)
                yb = torch.as_tensor(y_sub[s:s + self.batch_size], dtype=dtype)
                tb = torch.full((xb.shape[0],), int(t), dtype=torch.long)
                outs.append(self.net(xb, yb, style.expand(xb.shape[0], -1), tb).double().numpy())
        self.net.train(was_training)
        return np.concatenate(outs, axis=0)


def init_model(spec: DenoiserSpec, seed: int = 0, dtype=torch.float32) -> Denoiser:
    """Build a UNet with parameters determined entirely by ``seed``."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(spec).to(dtype)
    n = count_parameters(net)
    logger.info("initialized denoiser with %d parameters", n)
    d = Denoiser(net)
    d.num_parameters = n
    return d


def predict_noise(d, x_t_sub: SubVolume | np.ndarray, y_sub: SubVolume | np.ndarray, key: StyleKey, t: int,
                  T: int | None = None) -> np.ndarray:
    """Noise estimate of shape (2N+1, H, W) for one pair of sub-volumes."""
    xs = x_t_sub.data if isinstance(x_t_sub, SubVolume) else np.asarray(x_t_sub)
    ys = y_sub.data if isinstance(y_sub, SubVolume) else np.asarray(y_sub)
    if isinstance(x_t_sub, SubVolume) and isinstance(y_sub, SubVolume) and x_t_sub.center_index != y_sub.center_index:
        raise ValueError("x_t and y sub-volumes must share their centre index")
    if xs.shape != ys.shape:
        raise ValueError(f"shape mismatch: {xs.shape} vs {ys.shape}")
    if t < 1 or (T is not None and t > T):
        raise ValueError(f"timestep {t} out of range")
    return d(xs[None], ys[None], key, t)[0]
