"""Conditional noise-prediction network.

A small convolutional encoder-decoder with skip connections predicts the
noise in a corrupted frame from 9 input channels: the 4-channel conditioning
image, its 1-channel missing mask, and the 4-channel noisy target.  The
noise level enters through a sinusoidal step embedding that modulates every
block's features (per-channel scale and shift).  An EMA shadow of the
weights is kept for sampling.
"""

import copy
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..rng import derive_int

BASE_CHANNELS = 32
CHANNEL_MULTS = (1, 2, 4)
TEMB_DIM = 128
TEMB_HIDDEN = 256
GROUPNORM_GROUPS = 8
IN_CHANNELS = 9
OUT_CHANNELS = 4


@dataclass
class GuidanceConfig:
    """Classifier-free guidance weight and training-time conditioning dropout."""

    weight: float = 1.0
    dropout_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError(f"dropout_prob must be in [0, 1], got {self.dropout_prob}")
        if self.weight < 0.0:
            raise ValueError(f"guidance weight must be >= 0, got {self.weight}")


def sinusoidal_embedding(t: np.ndarray, dim: int = TEMB_DIM) -> np.ndarray:
    """Sinusoidal features of (integer) step indices; shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class _FilmBlock(nn.Module):
    """Residual block with feature-wise affine modulation from the step embedding."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPNORM_GROUPS, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(GROUPNORM_GROUPS, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.film = nn.Linear(TEMB_HIDDEN, 2 * cout)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class _UNet(nn.Module):
    def __init__(self, base_channels: int = BASE_CHANNELS,
                 channel_mults=CHANNEL_MULTS):
        super().__init__()
        chans = [base_channels * m for m in channel_mults]
        self.time_mlp = nn.Sequential(
            nn.Linear(TEMB_DIM, TEMB_HIDDEN), nn.SiLU(),
            nn.Linear(TEMB_HIDDEN, TEMB_HIDDEN))
        self.stem = nn.Conv2d(IN_CHANNELS, chans[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        c = chans[0]
        for i, ch in enumerate(chans):
            self.enc_blocks.append(_FilmBlock(c, ch))
            c = ch
            if i < len(chans) - 1:
                self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = _FilmBlock(c, c)
        self.dec_blocks = nn.ModuleList()
        for ch in reversed(chans):
            self.dec_blocks.append(_FilmBlock(c + ch, ch))
            c = ch
        self.out_norm = nn.GroupNorm(GROUPNORM_GROUPS, c)
        self.out_conv = nn.Conv2d(c, OUT_CHANNELS, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x, temb):
        temb = self.time_mlp(temb)
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid(h, temb)
        for block, skip in zip(self.dec_blocks, reversed(skips)):
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


class DenoiserModel:
    """Network weights plus their EMA shadow and training progress."""

    def __init__(self, net: _UNet, ema_net: _UNet, step: int, arch: dict,
                 config_hash: str):
        self.net = net
        self.ema_net = ema_net
        self.step = step
        self.arch = arch
        self.config_hash = config_hash

    @property
    def resolution(self) -> int:
        return int(self.arch["resolution"])

    def parameter_tensors(self, ema: bool = False) -> dict:
        src = self.ema_net if ema else self.net
        return dict(src.state_dict())

    def update_ema(self, decay: float):
        with torch.no_grad():
            for p_ema, p in zip(self.ema_net.parameters(), self.net.parameters()):
                p_ema.mul_(decay).add_(p, alpha=1.0 - decay)

    def clone(self) -> "DenoiserModel":
        return DenoiserModel(copy.deepcopy(self.net), copy.deepcopy(self.ema_net),
                             self.step, dict(self.arch), self.config_hash)


def default_arch(resolution: int, t_steps: int, beta_lo: float,
                 beta_hi: float) -> dict:
    return {
        "base_channels": BASE_CHANNELS,
        "channel_mults": list(CHANNEL_MULTS),
        "temb_dim": TEMB_DIM,
        "resolution": int(resolution),
        "t_steps": int(t_steps),
        "beta_lo": float(beta_lo),
        "beta_hi": float(beta_hi),
    }


def arch_hash(arch: dict) -> str:
    return json.dumps(arch, sort_keys=True, separators=(",", ":"))


def create_model(arch: dict, seed: int, config_hash: str = "") -> DenoiserModel:
    """Fresh model with weights drawn from the (seed, "model-init") stream."""
    torch.manual_seed(derive_int(seed, "model-init"))
    net = _UNet(base_channels=arch["base_channels"],
                channel_mults=tuple(arch["channel_mults"]))
    ema_net = copy.deepcopy(net)
    for p in ema_net.parameters():
        p.requires_grad_(False)
    return DenoiserModel(net=net, ema_net=ema_net, step=0, arch=dict(arch),
                         config_hash=config_hash)


def _stack_input(x: np.ndarray, m: np.ndarray, y_t: np.ndarray) -> np.ndarray:
    """(H, W, 4) + (H, W) + (H, W, 4) -> (9, H, W) channel stack."""
    x = np.asarray(x, dtype=np.float32)
    y_t = np.asarray(y_t, dtype=np.float32)
    m = np.asarray(m, dtype=np.float32)
    if x.shape != y_t.shape or x.shape[:2] != m.shape or x.shape[2] != 4:
        raise ValueError(f"conditioning/input shape mismatch: {x.shape}, "
                         f"{m.shape}, {y_t.shape}")
    return np.concatenate([
        np.moveaxis(x, 2, 0), m[None], np.moveaxis(y_t, 2, 0)], axis=0)


def apply_batch(model: DenoiserModel, inputs: torch.Tensor, t: np.ndarray,
                use_ema: bool = False) -> torch.Tensor:
    """Forward pass on a (B, 9, H, W) batch at integer steps t (B,)."""
    temb = torch.from_numpy(
        sinusoidal_embedding(t).astype(np.float32)).to(inputs.dtype)
    net = model.ema_net if use_ema else model.net
    return net(inputs, temb)


def denoiser_apply(model: DenoiserModel, x: np.ndarray, m: np.ndarray,
                   y_t: np.ndarray, t: int, use_ema: bool = False) -> np.ndarray:
    """Predicted noise for one frame; inputs are (H, W, 4)/(H, W) arrays.

    The unconditional variant is obtained by passing zeros for x and m.
    """
    t_steps = int(model.arch["t_steps"])
    if not 1 <= t <= t_steps:
        raise ValueError(f"t must be in [1, {t_steps}], got {t}")
    inp = torch.from_numpy(_stack_input(x, m, y_t)[None])
    with torch.no_grad():
        out = apply_batch(model, inp, np.array([t]), use_ema=use_ema)
    return np.moveaxis(out[0].numpy(), 0, 2)


def cfg_epsilon(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """Guided noise estimate: (1 + w) * conditional - w * unconditional."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError("prediction shapes differ")
    return (1.0 + w) * eps_cond - w * eps_uncond
