"""voldiff: volumetric diffusion denoising with zero-convolution control.

Pre-train an unconditional 3D diffusion model on clean volumes, then
fine-tune a zero-convolution control adapter on a small set of paired
low-/normal-dose volumes; denoise full volumes by patch-overlap
reverse-diffusion sampling and evaluate with PSNR/SSIM plus Wilcoxon
signed-rank testing.
"""

from .controlnet import ControlAdapter3d, controlled_forward, finetune_step, freeze_check, init_adapter
from .diffusion import (
    NoiseSchedule,
    eps_matching_loss,
    forward_sample,
    forward_step,
    make_linear_schedule,
    posterior_mean,
    predict_x0,
    reverse_step,
    sample,
    subsample_schedule,
)
from .estimators import (
    ConditionalDiffusionDenoiser,
    ControlNetDenoiser,
    DataConsistencyDenoiser,
    DiffusionPrior,
    SupervisedUNetDenoiser,
)
from .inference import InferenceConfig, dc_baseline_denoise, denoise_volume, regress_volume
from .metrics import MetricsReport, evaluate_suite, psnr, ssim3d, wilcoxon_signed_rank
from .patches import PatchGrid, extract, plan_patches, stitch
from .phantom import PairedSample, PhantomSpec, generate_phantom, sample_phantom_spec, simulate_low_dose
from .unet import UNet3d, UNetConfig, analytic_param_count, build_unet, timestep_embedding
from .volume import Volume, denormalize, load_volume, normalize, save_volume

__version__ = "0.1.0"

__all__ = [
    "ConditionalDiffusionDenoiser",
    "ControlAdapter3d",
    "ControlNetDenoiser",
    "DataConsistencyDenoiser",
    "DiffusionPrior",
    "InferenceConfig",
    "MetricsReport",
    "NoiseSchedule",
    "PairedSample",
    "PatchGrid",
    "PhantomSpec",
    "SupervisedUNetDenoiser",
    "UNet3d",
    "UNetConfig",
    "Volume",
    "analytic_param_count",
    "build_unet",
    "controlled_forward",
    "dc_baseline_denoise",
    "denoise_volume",
    "denormalize",
    "eps_matching_loss",
    "evaluate_suite",
    "extract",
    "finetune_step",
    "forward_sample",
    "forward_step",
    "freeze_check",
    "generate_phantom",
    "init_adapter",
    "load_volume",
    "make_linear_schedule",
    "normalize",
    "plan_patches",
    "posterior_mean",
    "predict_x0",
    "psnr",
    "regress_volume",
    "reverse_step",
    "sample",
    "sample_phantom_spec",
    "save_volume",
    "simulate_low_dose",
    "ssim3d",
    "stitch",
    "subsample_schedule",
    "timestep_embedding",
    "wilcoxon_signed_rank",
]
