"""Scikit-learn style estimators wrapping the denoising methods.

These classes follow the fit/transform/get_params conventions so the
denoisers compose with the wider ecosystem (cloning, grid search over
hyperparameters, pipelines operating on lists of volumes). X is always
the degraded input (low-dose volumes) and y the clean targets; all
volumes must be normalized to [-1, 1] (see `voldiff.volume.normalize`).

The heavy lifting lives in `training` and `inference`; estimators hold
configuration in __init__ (unmodified, per sklearn contract) and learned
state in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .controlnet import init_adapter
from .diffusion import make_linear_schedule
from .errors import ContractViolationError, DataError, ParameterError
from .inference import InferenceConfig, denoise_volume, regress_volume
from .training import (
    finetune_adapter,
    pretrain_diffusion,
    train_conditional_diffusion,
    train_supervised_regressor,
)
from .unet import UNetConfig, build_unet
from .volume import UNITS_NORMALIZED, Volume


def as_normalized_volume(x) -> Volume:
    """Validation helper: accept a Volume or a [-1, 1] float array."""
    if isinstance(x, Volume):
        if x.units != UNITS_NORMALIZED:
            raise DataError(f"expected a normalized volume, got units={x.units!r}")
        return x
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 3:
        raise DataError(f"expected a 3D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("input contains non-finite values")
    if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
        raise DataError("array inputs must already be normalized to [-1, 1]")
    return Volume(arr, units=UNITS_NORMALIZED, norm_constant=1.0)


def as_volume_list(X) -> list[Volume]:
    if isinstance(X, (Volume, np.ndarray)):
        X = [X]
    vols = [as_normalized_volume(v) for v in X]
    if not vols:
        raise DataError("need at least one volume")
    return vols


class _NetworkParams:
    """Shared __init__ parameter block for estimators that build a UNet."""

    def _unet_config(self, in_channels: int = 1) -> UNetConfig:
        cfg = UNetConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            channel_mult=list(self.channel_mult),
            blocks_per_level=self.blocks_per_level,
            time_embed_dim=self.time_embed_dim,
            in_channels=in_channels,
            patch_edge=self.patch_edge,
        )
        cfg.validate()
        return cfg

    def _schedule(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def _inference_config(self, method: str) -> InferenceConfig:
        cfg = InferenceConfig(
            method=method,
            patch_edge=self.patch_edge,
            stride=self.patch_stride,
            sample_stride=self.sample_stride,
            seed=self.seed,
            workers=self.workers,
        )
        cfg.validate()
        return cfg


class DiffusionPrior(BaseEstimator, _NetworkParams):
    """Unconditional volumetric diffusion model trained on clean volumes."""

    def __init__(
        self,
        T=1000,
        beta_start=1e-4,
        beta_end=0.02,
        levels=3,
        base_channels=16,
        channel_mult=(1, 2, 4),
        blocks_per_level=1,
        time_embed_dim=128,
        patch_edge=32,
        steps=2000,
        batch_size=4,
        lr=1e-4,
        seed=0,
    ):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.levels = levels
        self.base_channels = base_channels
        self.channel_mult = channel_mult
        self.blocks_per_level = blocks_per_level
        self.time_embed_dim = time_embed_dim
        self.patch_edge = patch_edge
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        vols = as_volume_list(X)
        self.schedule_ = self._schedule()
        self.net_ = build_unet(self._unet_config(), self.seed)
        _, losses = pretrain_diffusion(
            self.net_,
            [v.data for v in vols],
            self.schedule_,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
        )
        self.losses_ = losses
        return self

    def _require_fitted(self):
        if not hasattr(self, "net_"):
            raise ContractViolationError("prior is not fitted; call fit() or load a checkpoint")


class ControlNetDenoiser(BaseEstimator, TransformerMixin):
    """Zero-convolution adapter fine-tuned on paired volumes over a frozen prior."""

    def __init__(
        self,
        prior=None,
        steps=1000,
        batch_size=4,
        lr=1e-4,
        patch_stride=16,
        sample_stride=10,
        workers=1,
        seed=0,
    ):
        self.prior = prior
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.patch_stride = patch_stride
        self.sample_stride = sample_stride
        self.workers = workers
        self.seed = seed

    def fit(self, X, y):
        if self.prior is None:
            raise ParameterError("ControlNetDenoiser requires a fitted DiffusionPrior")
        self.prior._require_fitted()
        low = as_volume_list(X)
        full = as_volume_list(y)
        if len(low) != len(full):
            raise DataError(f"{len(low)} inputs vs {len(full)} targets")
        base = self.prior.net_
        self.adapter_ = init_adapter(base)
        _, losses = finetune_adapter(
            base,
            self.adapter_,
            [v.data for v in full],
            [v.data for v in low],
            self.prior.schedule_,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
        )
        self.losses_ = losses
        return self

    def transform(self, X) -> list[Volume]:
        if not hasattr(self, "adapter_"):
            raise ContractViolationError("denoiser is not fitted")
        prior = self.prior
        cfg = InferenceConfig(
            method="controlnet",
            patch_edge=prior.patch_edge,  # inference geometry follows the prior
            stride=self.patch_stride,
            sample_stride=self.sample_stride,
            seed=self.seed,
            workers=self.workers,
        )
        return [
            denoise_volume(prior.net_, self.adapter_, v, prior.schedule_, cfg)
            for v in as_volume_list(X)
        ]

    def predict(self, X):
        return self.transform(X)


class ConditionalDiffusionDenoiser(BaseEstimator, TransformerMixin, _NetworkParams):
    """From-scratch conditional diffusion (input channel concatenation)."""

    def __init__(
        self,
        T=1000,
        beta_start=1e-4,
        beta_end=0.02,
        levels=3,
        base_channels=16,
        channel_mult=(1, 2, 4),
        blocks_per_level=1,
        time_embed_dim=128,
        patch_edge=32,
        steps=1000,
        batch_size=4,
        lr=1e-4,
        patch_stride=16,
        sample_stride=10,
        workers=1,
        seed=0,
    ):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.levels = levels
        self.base_channels = base_channels
        self.channel_mult = channel_mult
        self.blocks_per_level = blocks_per_level
        self.time_embed_dim = time_embed_dim
        self.patch_edge = patch_edge
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.patch_stride = patch_stride
        self.sample_stride = sample_stride
        self.workers = workers
        self.seed = seed

    def fit(self, X, y):
        low = as_volume_list(X)
        full = as_volume_list(y)
        if len(low) != len(full):
            raise DataError(f"{len(low)} inputs vs {len(full)} targets")
        self.schedule_ = self._schedule()
        self.net_ = build_unet(self._unet_config(in_channels=2), self.seed)
        self.losses_ = train_conditional_diffusion(
            self.net_,
            [v.data for v in full],
            [v.data for v in low],
            self.schedule_,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
        )
        return self

    def transform(self, X) -> list[Volume]:
        if not hasattr(self, "net_"):
            raise ContractViolationError("denoiser is not fitted")
        cfg = self._inference_config("con_ddpm")
        return [denoise_volume(self.net_, None, v, self.schedule_, cfg) for v in as_volume_list(X)]

    def predict(self, X):
        return self.transform(X)


class SupervisedUNetDenoiser(BaseEstimator, TransformerMixin, _NetworkParams):
    """Direct paired regression with the same UNet backbone."""

    def __init__(
        self,
        levels=3,
        base_channels=16,
        channel_mult=(1, 2, 4),
        blocks_per_level=1,
        time_embed_dim=128,
        patch_edge=32,
        steps=1000,
        batch_size=4,
        lr=1e-4,
        patch_stride=16,
        workers=1,
        seed=0,
    ):
        self.levels = levels
        self.base_channels = base_channels
        self.channel_mult = channel_mult
        self.blocks_per_level = blocks_per_level
        self.time_embed_dim = time_embed_dim
        self.patch_edge = patch_edge
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.patch_stride = patch_stride
        self.workers = workers
        self.seed = seed

    def fit(self, X, y):
        low = as_volume_list(X)
        full = as_volume_list(y)
        if len(low) != len(full):
            raise DataError(f"{len(low)} inputs vs {len(full)} targets")
        self.net_ = build_unet(self._unet_config(), self.seed)
        self.losses_ = train_supervised_regressor(
            self.net_,
            [v.data for v in full],
            [v.data for v in low],
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
        )
        return self

    def transform(self, X) -> list[Volume]:
        if not hasattr(self, "net_"):
            raise ContractViolationError("denoiser is not fitted")
        cfg = InferenceConfig(
            method="unet",
            patch_edge=self.patch_edge,
            stride=self.patch_stride,
            seed=self.seed,
            workers=self.workers,
        )
        return [regress_volume(self.net_, v, cfg) for v in as_volume_list(X)]

    def predict(self, X):
        return self.transform(X)


class DataConsistencyDenoiser(BaseEstimator, TransformerMixin):
    """Unconditional prior steered by a data-consistency constraint at sampling."""

    def __init__(self, prior=None, dc_strength=0.5, patch_stride=16, sample_stride=10, workers=1, seed=0):
        self.prior = prior
        self.dc_strength = dc_strength
        self.patch_stride = patch_stride
        self.sample_stride = sample_stride
        self.workers = workers
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.prior is None:
            raise ParameterError("DataConsistencyDenoiser requires a fitted DiffusionPrior")
        self.prior._require_fitted()
        self.fitted_ = True
        return self

    def transform(self, X) -> list[Volume]:
        if not hasattr(self, "fitted_"):
            raise ContractViolationError("denoiser is not fitted")
        prior = self.prior
        cfg = InferenceConfig(
            method="ddpm_dc",
            patch_edge=prior.patch_edge,
            stride=self.patch_stride,
            sample_stride=self.sample_stride,
            seed=self.seed,
            dc_strength=self.dc_strength,
            workers=self.workers,
        )
        return [denoise_volume(prior.net_, None, v, prior.schedule_, cfg) for v in as_volume_list(X)]

    def predict(self, X):
        return self.transform(X)
