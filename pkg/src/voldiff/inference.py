"""Full-volume denoising by patchwise reverse diffusion with blending.

Each patch runs its own reverse chain with a noise stream derived from
(seed, patch origin), so results are reproducible regardless of worker
count or completion order; patches are embarrassingly parallel and are
reduced deterministically in patch-index order. Outputs are clipped to
the normalized range [-1, 1] before being returned, since activity is
nonnegative after denormalization.

Method tags:
    controlnet  conditional sampling through a zero-conv adapter
    con_ddpm    conditional diffusion with y as a second input channel
    ddpm_dc     unconditional diffusion with a data-consistency pull
                toward y in predicted-x0 space (strength lambda)
    unet        supervised single-pass regression (no diffusion loop)

Every diffusion method clamps the per-step predicted x0 to the
normalized data range [-1, 1] (the classic clip-denoised sampler);
without it, desk-scale models amplify prediction error over the
reverse chain and diverge. The data-consistency correction composes
with that clamp.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import diffusion
from .controlnet import ControlAdapter3d, controlled_forward
from .errors import ConfigError, ParameterError
from .patches import extract, plan_patches, stitch
from .seeding import derive_seed
from .unet import UNet3d
from .volume import Volume

METHODS = ("controlnet", "con_ddpm", "unet", "ddpm_dc")


@dataclass
class InferenceConfig:
    method: str = "controlnet"
    patch_edge: int = 32
    stride: int = 16
    sample_stride: int = 10
    seed: int = 0
    dc_strength: float = 0.5  # ddpm_dc only
    workers: int = 1

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method tag {self.method!r}; expected one of {METHODS}")
        if self.patch_edge < 1 or not (1 <= self.stride <= self.patch_edge):
            raise ConfigError(f"bad patch geometry (edge={self.patch_edge}, stride={self.stride})")
        if self.sample_stride < 1:
            raise ConfigError("sample_stride must be >= 1")
        if self.dc_strength < 0:
            raise ParameterError(f"dc_strength must be >= 0, got {self.dc_strength}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _patch_seed(seed: int, origin: tuple[int, int, int]) -> int:
    return derive_seed(seed, "patch", *origin)


def clip_x0(x0_hat: torch.Tensor) -> torch.Tensor:
    """Clamp a predicted clean volume to the normalized data range."""
    return torch.clamp(x0_hat, -1.0, 1.0)


def _run_patches(fn, grid, workers: int) -> list[np.ndarray]:
    indices = range(len(grid.origins))
    if workers <= 1:
        results = [fn(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, indices))
    return results


def _sampled_patch(eps_fn, cfg, sub_sched, tmap, origin, correct_x0=None) -> np.ndarray:
    gen = torch.Generator().manual_seed(_patch_seed(cfg.seed, origin))
    shape = (1, 1, cfg.patch_edge, cfg.patch_edge, cfg.patch_edge)
    out = diffusion.sample(
        eps_fn, shape, sub_sched, gen, timestep_map=tmap, correct_x0=correct_x0
    )
    return out[0, 0].numpy()


def denoise_volume(
    base: UNet3d,
    adapter: Optional[ControlAdapter3d],
    y: Volume,
    sched: diffusion.NoiseSchedule,
    cfg: InferenceConfig,
) -> Volume:
    """Patchwise reverse-diffusion denoising of a normalized volume."""
    cfg.validate()
    if cfg.method == "unet":
        raise ConfigError("method 'unet' has no diffusion loop; use regress_volume")
    if cfg.method == "controlnet" and adapter is None:
        raise ConfigError("method 'controlnet' requires an adapter")
    if cfg.method in ("con_ddpm", "ddpm_dc") and adapter is not None:
        raise ConfigError(f"method {cfg.method!r} does not take an adapter")
    if cfg.method == "con_ddpm" and base.config.in_channels != 2:
        raise ConfigError("method 'con_ddpm' requires a 2-channel network")

    grid = plan_patches(y.dims, cfg.patch_edge, cfg.stride)
    y_patches = extract(y.data, grid)
    sub_sched, tmap = diffusion.subsample_schedule(sched, cfg.sample_stride)

    def run(i: int) -> np.ndarray:
        y_t = torch.from_numpy(y_patches[i])[None, None]
        if cfg.method == "controlnet":
            eps_fn = lambda x, t: controlled_forward(base, adapter, x, t, y_t)
            correct = clip_x0
        elif cfg.method == "con_ddpm":
            eps_fn = lambda x, t: base(torch.cat([x, y_t], dim=1), t)
            correct = clip_x0
        else:  # ddpm_dc
            eps_fn = lambda x, t: base(x, t)
            lam = cfg.dc_strength
            # lam == 0 keeps the exact unconditional (clamped) sampling path
            if lam == 0:
                correct = clip_x0
            else:
                correct = lambda x0h: clip_x0(x0h - lam * (x0h - y_t))
        with torch.no_grad():
            return _sampled_patch(eps_fn, cfg, sub_sched, tmap, grid.origins[i], correct)

    patches = _run_patches(run, grid, cfg.workers)
    out = np.clip(stitch(patches, grid), -1.0, 1.0)
    return Volume(out, y.spacing, y.units, y.norm_constant)


def dc_baseline_denoise(
    base: UNet3d, y: Volume, sched: diffusion.NoiseSchedule, cfg: InferenceConfig
) -> Volume:
    """Unconditional sampler steered by a data-consistency constraint."""
    cfg = InferenceConfig(**{**cfg.__dict__, "method": "ddpm_dc"})
    return denoise_volume(base, None, y, sched, cfg)


def regress_volume(net: UNet3d, y: Volume, cfg: InferenceConfig) -> Volume:
    """Single forward pass per patch for the supervised baseline."""
    cfg.validate()
    grid = plan_patches(y.dims, cfg.patch_edge, cfg.stride)
    y_patches = extract(y.data, grid)

    def run(i: int) -> np.ndarray:
        with torch.no_grad():
            pred = net(torch.from_numpy(y_patches[i])[None, None], 0)
        return pred[0, 0].numpy()

    patches = _run_patches(run, grid, cfg.workers)
    out = np.clip(stitch(patches, grid), -1.0, 1.0)
    return Volume(out, y.spacing, y.units, y.norm_constant)
