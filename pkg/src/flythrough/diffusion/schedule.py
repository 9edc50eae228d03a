"""Noise schedule and the forward (corruption) process.

The forward process injects noise only into the ground region of a frame;
sky content is at infinity, assumed static, and passes through untouched.
"""

from dataclasses import dataclass

import numpy as np

# Reference schedule length; configured (lo, hi) bounds are defined at this
# length and rescaled by BASE_SCHEDULE_STEPS/T for shorter schedules so the
# total corruption (sum of beta) is preserved.
BASE_SCHEDULE_STEPS = 2000


@dataclass
class NoiseSchedule:
    """Per-step beta with derived alpha = 1 - beta and gamma = cumprod(alpha).

    Steps are 1-indexed: beta[t - 1] belongs to step t.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        if self.T < 1 or len(self.beta) != self.T:
            raise ValueError("schedule length mismatch")
        if not ((self.beta > 0.0) & (self.beta < 1.0)).all():
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.beta) < 0):
            raise ValueError("beta must be non-decreasing")
        if np.any(np.diff(self.gamma) >= 0):
            raise ValueError("gamma must be strictly decreasing")

    def gamma_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [1, {self.T}], got {t}")
        return float(self.gamma[t - 1])

    def alpha_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [1, {self.T}], got {t}")
        return float(self.alpha[t - 1])


def make_schedule(T: int, beta_lo: float, beta_hi: float) -> NoiseSchedule:
    """Linear beta schedule from beta_lo to beta_hi over T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_lo <= beta_hi < 1.0):
        raise ValueError(f"need 0 < beta_lo <= beta_hi < 1, got ({beta_lo}, {beta_hi})")
    if T == 1:
        beta = np.array([beta_lo], dtype=np.float64)
    else:
        t = np.arange(T, dtype=np.float64)
        beta = beta_lo + t / (T - 1) * (beta_hi - beta_lo)
    alpha = 1.0 - beta
    gamma = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, gamma=gamma)


def scaled_schedule(T: int, beta_lo: float, beta_hi: float) -> NoiseSchedule:
    """Schedule with (beta_lo, beta_hi) defined at BASE_SCHEDULE_STEPS.

    Shorter schedules scale beta by BASE_SCHEDULE_STEPS/T, preserving the
    total corruption and hence the terminal gamma.
    """
    scale = BASE_SCHEDULE_STEPS / T
    return make_schedule(T, beta_lo * scale, beta_hi * scale)


def to_signed(c: np.ndarray) -> np.ndarray:
    """Map [0, 1] image values to the network's [-1, 1] range."""
    return np.asarray(c, dtype=np.float32) * 2.0 - 1.0


def from_signed(s: np.ndarray) -> np.ndarray:
    """Inverse of to_signed, clamped into [0, 1]."""
    return np.clip((np.asarray(s, dtype=np.float32) + 1.0) / 2.0, 0.0, 1.0)


def q_sample(y: np.ndarray, gamma: float, eps: np.ndarray,
             ground: np.ndarray) -> np.ndarray:
    """Noisy version of y at level gamma: ground pixels only.

    y and eps are (H, W, 4) in the [-1, 1] range; sky pixels (ground False)
    are returned unchanged.
    """
    y = np.asarray(y, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if y.shape != eps.shape:
        raise ValueError("y and eps shapes differ")
    noisy = np.float32(np.sqrt(gamma)) * y + np.float32(np.sqrt(1.0 - gamma)) * eps
    return np.where(np.asarray(ground, dtype=bool)[..., None], noisy, y)
