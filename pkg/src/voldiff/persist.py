"""Save/load trained models and adapters in the VNCKPT1 container.

A model checkpoint records the network architecture, its role
(diffusion prior, conditional diffusion, or supervised regressor), and
the noise-schedule parameters it was trained under, so inference needs
no side channel. Adapter checkpoints additionally pin the digest of the
frozen base network; loading against a different base is rejected.
"""

from __future__ import annotations

import dataclasses

import torch

from .checkpoint import (
    load_into_module,
    parameter_digest,
    read_checkpoint,
    save_module,
    write_checkpoint,
)
from .config import ScheduleConfig
from .controlnet import ControlAdapter3d
from .errors import CheckpointError, CheckpointTensorMismatch
from .unet import UNet3d, UNetConfig, build_unet

ROLE_DIFFUSION = "diffusion"
ROLE_CONDITIONAL = "con_ddpm"
ROLE_REGRESSOR = "unet"


def save_model(
    path,
    net: UNet3d,
    role: str,
    schedule: ScheduleConfig,
    extra: dict | None = None,
    opt_tensors: list[tuple[str, torch.Tensor]] | None = None,
) -> None:
    config = {
        "network": net.config.to_dict(),
        "role": role,
        "schedule": dataclasses.asdict(schedule),
    }
    tensors = list(net.state_dict().items())
    if opt_tensors:
        tensors.extend(opt_tensors)
    write_checkpoint(path, "unet", config, tensors, extra)


def load_model(path, expected_role: str | None = None):
    """Returns (net, schedule_config, extra, raw_tensors)."""
    kind, config, extra, tensors = read_checkpoint(path)
    if kind != "unet":
        raise CheckpointError(f"{path}: expected a model checkpoint, found kind={kind!r}")
    role = config.get("role")
    if expected_role is not None and role != expected_role:
        raise CheckpointError(f"{path}: checkpoint role {role!r} != expected {expected_role!r}")
    net = build_unet(UNetConfig.from_dict(config["network"]), seed=0)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    load_into_module(net, params)
    sched = ScheduleConfig(**config.get("schedule", {}))
    return net, sched, extra, tensors


def save_adapter(
    path,
    adapter: ControlAdapter3d,
    schedule: ScheduleConfig,
    extra: dict | None = None,
    opt_tensors: list[tuple[str, torch.Tensor]] | None = None,
) -> None:
    config = {
        "network": adapter.config.to_dict(),
        "schedule": dataclasses.asdict(schedule),
    }
    merged = dict(extra or {})
    merged["base_digest"] = adapter.base_digest
    tensors = list(adapter.state_dict().items())
    if opt_tensors:
        tensors.extend(opt_tensors)
    write_checkpoint(path, "adapter", config, tensors, merged)


def load_adapter(path, base: UNet3d):
    """Rebuild an adapter against its frozen base; returns (adapter, schedule_config, extra, raw)."""
    kind, config, extra, tensors = read_checkpoint(path)
    if kind != "adapter":
        raise CheckpointError(f"{path}: expected an adapter checkpoint, found kind={kind!r}")
    if config.get("network") != base.config.to_dict():
        raise CheckpointTensorMismatch(
            f"{path}: adapter architecture does not match the provided base network"
        )
    base_digest = parameter_digest(base)
    if extra.get("base_digest") != base_digest:
        raise CheckpointTensorMismatch(
            f"{path}: adapter was fine-tuned against a different base network "
            f"(digest {extra.get('base_digest', '?')[:12]} != {base_digest[:12]})"
        )
    adapter = ControlAdapter3d(base)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    load_into_module(adapter, params)
    adapter.base_digest = base_digest
    sched = ScheduleConfig(**config.get("schedule", {}))
    return adapter, sched, extra, tensors


# save_module re-export keeps single-module checkpointing near its format
__all__ = [
    "ROLE_CONDITIONAL",
    "ROLE_DIFFUSION",
    "ROLE_REGRESSOR",
    "load_adapter",
    "load_model",
    "save_adapter",
    "save_model",
    "save_module",
]
