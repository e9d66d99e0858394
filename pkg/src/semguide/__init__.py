"""Score-reweighted particle sampling for conditional diffusion forecasters."""

from .errors import ConfigError, DataError, SemGuideError, ShapeError, ScheduleError, TrainingError
from .schedule import NoiseSchedule, denoise_estimate, forward_noise, make_linear_schedule
from .sampler import ddpm_sample, forecast_batch, median_forecast, semguide_sample

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "SemGuideError", "ShapeError", "ScheduleError", "TrainingError",
    "NoiseSchedule", "denoise_estimate", "forward_noise", "make_linear_schedule",
    "ddpm_sample", "forecast_batch", "median_forecast", "semguide_sample",
]
