"""HC3L-Diff: CBCT to synthetic CT with a hybrid-conditioned latent diffusion model, in NumPy."""

from .config import ConfigError, PipelineConfig
from .dosimetry import DoseGrid, GammaCriteria, dvh_parameter, gamma_map, gpr, synthetic_dose
from .errors import FormatError, NumericalError, StateError, UndefinedResultError
from .fourier import HfeConfig, extract_high_frequency, fft2, ifft2
from .grid import RngStream, load_container, save_container
from .ldm import Denoiser, DenoiserConfig, build_condition, predict_noise, synthesize
from .metrics import evaluate, evaluate_slices, mae, psnr, ssim
from .phantom import PhantomSpec, generate_split, hu_to_unit, unit_to_hu
from .schedule import NoiseSchedule, ddim_step, linear_schedule, make_subsequence, q_sample
from .ufe import UFE, UfeConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Denoiser",
    "DenoiserConfig",
    "DoseGrid",
    "FormatError",
    "GammaCriteria",
    "HfeConfig",
    "NoiseSchedule",
    "NumericalError",
    "PhantomSpec",
    "PipelineConfig",
    "RngStream",
    "StateError",
    "UFE",
    "UfeConfig",
    "UndefinedResultError",
    "build_condition",
    "ddim_step",
    "dvh_parameter",
    "evaluate",
    "evaluate_slices",
    "extract_high_frequency",
    "fft2",
    "gamma_map",
    "generate_split",
    "gpr",
    "hu_to_unit",
    "ifft2",
    "linear_schedule",
    "load_container",
    "make_subsequence",
    "mae",
    "predict_noise",
    "psnr",
    "q_sample",
    "save_container",
    "ssim",
    "synthesize",
    "synthetic_dose",
    "unit_to_hu",
]
