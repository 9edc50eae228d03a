from .model import DenoiserModel, GuidanceConfig, cfg_epsilon, denoiser_apply
from .sampling import StochasticConditioner, p_sample_step, sample_refine
from .schedule import NoiseSchedule, from_signed, make_schedule, q_sample, to_signed
from .training import train_loop, training_step

__all__ = [
    "DenoiserModel",
    "GuidanceConfig",
    "NoiseSchedule",
    "StochasticConditioner",
    "cfg_epsilon",
    "denoiser_apply",
    "from_signed",
    "make_schedule",
    "p_sample_step",
    "q_sample",
    "sample_refine",
    "to_signed",
    "train_loop",
    "training_step",
]
