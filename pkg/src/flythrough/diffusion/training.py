"""Training loop: noise-prediction regression on pseudo pairs.

Each step draws a batch of corrupted/ground-truth pairs, noises the targets
at random levels (ground region only), and regresses the injected noise.
The squared error is averaged over ground pixels; sky never contributes.
Conditioning inputs are zeroed with a small probability so the network also
learns the unconditional task for guidance at sampling time.
"""

from typing import List, Optional, Sequence

import numpy as np
import torch

from ..geometry import CameraPose, intrinsics_from_fov
from ..rng import stream
from ..synthdata import TrainingPair, make_pseudo_pair
from ..trajectory import TRAIN_FOV_RANGE, AutocruiseParams, TrainingPoseRange
from .model import DenoiserModel, GuidanceConfig, _stack_input, apply_batch
from .schedule import NoiseSchedule, q_sample, to_signed


def training_step(model: DenoiserModel, pairs, schedule: NoiseSchedule,
                  optimizer: torch.optim.Optimizer, guidance: GuidanceConfig,
                  rng: np.random.Generator, *, lr: float = 1e-4,
                  warmup: int = 500, ema_decay: float = 0.9999) -> float:
    """One optimization step over a pair or a batch of pairs; returns the loss."""
    if isinstance(pairs, TrainingPair):
        pairs = [pairs]
    if not pairs:
        raise ValueError("empty batch")

    T = schedule.T
    inputs, targets, grounds = [], [], []
    for pair in pairs:
        t = int(rng.integers(1, T + 1))
        eps = rng.standard_normal(pair.target.pixels.shape, dtype=np.float32)
        y = to_signed(pair.target.pixels)
        y_noisy = q_sample(y, schedule.gamma_at(t), eps, pair.ground)
        x = to_signed(pair.corrupted.pixels)
        m = pair.mask.astype(np.float32)
        if rng.random() < guidance.dropout_prob:
            x = np.zeros_like(x)
            m = np.zeros_like(m)
        inputs.append((_stack_input(x, m, y_noisy), t))
        targets.append(np.moveaxis(eps, 2, 0))
        grounds.append(pair.ground)

    batch = torch.from_numpy(np.stack([i for i, _ in inputs]))
    t_arr = np.array([t for _, t in inputs])
    eps_true = torch.from_numpy(np.stack(targets))
    ground = torch.from_numpy(np.stack(grounds))[:, None, :, :]

    step = model.step
    for group in optimizer.param_groups:
        group["lr"] = lr * min(1.0, (step + 1) / max(warmup, 1))

    optimizer.zero_grad()
    eps_pred = apply_batch(model, batch, t_arr, use_ema=False)
    se = (eps_pred - eps_true) ** 2 * ground
    denom = ground.sum() * eps_true.shape[1]
    loss = se.sum() / torch.clamp(denom, min=1)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite training loss at step {step}: {loss.item()} "
            f"(t={t_arr.tolist()})")
    loss.backward()
    optimizer.step()
    model.step = step + 1
    model.update_ema(ema_decay)
    return float(loss.detach())


def train_loop(model: DenoiserModel, dataset: Sequence, schedule: NoiseSchedule,
               *, seed: int, steps: int, batch: int = 8, lr: float = 1e-4,
               warmup: int = 500, ema_decay: float = 0.9999,
               guidance: Optional[GuidanceConfig] = None,
               params: Optional[AutocruiseParams] = None,
               pose_range: Optional[TrainingPoseRange] = None,
               log_every: int = 0, log=print) -> List[float]:
    """Train for `steps` steps on pseudo pairs built from dataset views.

    Every step derives its own RNG stream from (seed, step index), so a
    continued run reproduces a shorter run's prefix exactly.  Returns the
    per-step loss history.
    """
    guidance = guidance or GuidanceConfig()
    params = params or AutocruiseParams()
    pose_range = pose_range or TrainingPoseRange()
    optimizer = torch.optim.Adam(model.net.parameters(), lr=lr)
    origin = CameraPose.identity()
    history = []
    for _ in range(steps):
        rng = stream(seed, f"train/step/{model.step}")
        idx = rng.integers(0, len(dataset), size=batch)
        batch_pairs = []
        for i in idx:
            view = dataset[int(i)]
            fov = rng.uniform(*TRAIN_FOV_RANGE)
            K = intrinsics_from_fov(fov, view.width, view.height)
            batch_pairs.append(
                make_pseudo_pair(view, origin, K, pose_range, params, rng))
        loss = training_step(model, batch_pairs, schedule, optimizer, guidance,
                             rng, lr=lr, warmup=warmup, ema_decay=ema_decay)
        history.append(loss)
        if log_every and model.step % log_every == 0:
            recent = history[-log_every:]
            log(f"step {model.step}: loss {np.mean(recent):.4f}")
    return history
