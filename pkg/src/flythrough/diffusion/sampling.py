"""Guided reverse process with stochastic conditioning.

Each denoising step draws one conditioning view from a weighted set (the
warped previous frame, and optionally longer-range past/future views), so a
frame is effectively refined against several views at once.  Sky pixels are
pinned to the primary conditioning image throughout.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from ..geometry import RgbdImage
from ..synthdata import fill_missing_with_noise
from .model import DenoiserModel, GuidanceConfig, _stack_input, apply_batch, cfg_epsilon
from .schedule import NoiseSchedule, from_signed, to_signed


@dataclass
class ConditioningSource:
    """One candidate conditioning view.

    mask is the missing-region mask fed to the network (all False for
    sources that are conditioned without one).  When raw is set, the source
    is re-noise-filled at every draw instead of reusing one fill.
    """

    name: str
    image: RgbdImage
    mask: np.ndarray
    weight: float
    raw: Optional[RgbdImage] = None


class StochasticConditioner:
    """Weighted random choice over conditioning sources, with draw counts."""

    def __init__(self, sources: List[ConditioningSource]):
        if not sources:
            raise ValueError("need at least one conditioning source")
        total = sum(s.weight for s in sources)
        if total <= 0:
            raise ValueError("weights must sum to a positive value")
        self.sources = sources
        self._cum = np.cumsum([s.weight / total for s in sources])
        self.counts: Dict[str, int] = {s.name: 0 for s in sources}

    @property
    def primary(self) -> ConditioningSource:
        return self.sources[0]

    def draw(self, rng: np.random.Generator):
        """(x, m) of one randomly selected source; x in [-1, 1]."""
        i = int(np.searchsorted(self._cum, rng.random(), side="right"))
        i = min(i, len(self.sources) - 1)
        src = self.sources[i]
        self.counts[src.name] += 1
        if src.raw is not None:
            image = fill_missing_with_noise(src.raw, src.mask, rng)
        else:
            image = src.image
        return to_signed(image.pixels), src.mask.astype(np.float32)


def single_source_conditioner(image: RgbdImage, mask: np.ndarray,
                              name: str = "warped_prev",
                              refill: bool = False) -> StochasticConditioner:
    filled_or_raw = dict(raw=image) if refill else {}
    return StochasticConditioner([
        ConditioningSource(name=name, image=image,
                           mask=np.asarray(mask, dtype=bool), weight=1.0,
                           **filled_or_raw)
    ])


def reverse_step_value(y_t: np.ndarray, eps_hat: np.ndarray, alpha_t: float,
                       gamma_t: float, eps_t) -> np.ndarray:
    """One reverse-update: (y_t - (1-a)/sqrt(1-g) * eps_hat)/sqrt(a) + sqrt(1-a)*eps_t."""
    coef = np.float32((1.0 - alpha_t) / np.sqrt(1.0 - gamma_t))
    mean = (y_t - coef * eps_hat) / np.float32(np.sqrt(alpha_t))
    return mean + np.float32(np.sqrt(1.0 - alpha_t)) * eps_t


def _predict_eps(model: DenoiserModel, x: np.ndarray, m: np.ndarray,
                 y_t: np.ndarray, t: int, guidance: GuidanceConfig,
                 use_ema: bool) -> np.ndarray:
    cond = _stack_input(x, m, y_t)
    if guidance.weight == 0.0:
        batch = torch.from_numpy(cond[None])
        t_arr = np.array([t])
    else:
        uncond = _stack_input(np.zeros_like(x), np.zeros_like(m), y_t)
        batch = torch.from_numpy(np.stack([cond, uncond]))
        t_arr = np.array([t, t])
    with torch.no_grad():
        out = apply_batch(model, batch, t_arr, use_ema=use_ema).numpy()
    eps_c = np.moveaxis(out[0], 0, 2)
    if guidance.weight == 0.0:
        return eps_c
    eps_u = np.moveaxis(out[1], 0, 2)
    return cfg_epsilon(eps_c, eps_u, guidance.weight).astype(np.float32)


def p_sample_step(model: DenoiserModel, y_t: np.ndarray, t: int,
                  conditioner: StochasticConditioner, schedule: NoiseSchedule,
                  guidance: GuidanceConfig, ground: np.ndarray,
                  rng: np.random.Generator, use_ema: bool = True) -> np.ndarray:
    """One denoising step t -> t-1; updates ground pixels only."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    x, m = conditioner.draw(rng)
    eps_hat = _predict_eps(model, x, m, y_t, t, guidance, use_ema)
    if t > 1:
        eps_t = rng.standard_normal(y_t.shape, dtype=np.float32)
    else:
        eps_t = np.float32(0.0)
    y_prev = reverse_step_value(y_t, eps_hat, schedule.alpha_at(t),
                                schedule.gamma_at(t), eps_t)
    return np.where(np.asarray(ground, dtype=bool)[..., None], y_prev, y_t)


def sample_refine(model: DenoiserModel, conditioner: StochasticConditioner,
                  schedule: NoiseSchedule, guidance: GuidanceConfig,
                  ground: np.ndarray, rng: np.random.Generator,
                  use_ema: bool = True) -> RgbdImage:
    """Full reverse chain producing a refined RGBD frame.

    The chain starts from pure noise on the ground region and the primary
    conditioning image's sky elsewhere; output sky pixels are bit-equal to
    that conditioning sky.
    """
    ground = np.asarray(ground, dtype=bool)
    primary = conditioner.primary.image
    init = rng.standard_normal(primary.pixels.shape, dtype=np.float32)
    y = np.where(ground[..., None], init, to_signed(primary.pixels))
    for t in range(schedule.T, 0, -1):
        y = p_sample_step(model, y, t, conditioner, schedule, guidance, ground,
                          rng, use_ema=use_ema)
    pixels = np.where(ground[..., None], from_signed(y), primary.pixels)
    pixels = pixels.astype(np.float32)
    np.clip(pixels[..., 3], 0.0, 1.0, out=pixels[..., 3])
    return RgbdImage(pixels=pixels, sky=~ground)
