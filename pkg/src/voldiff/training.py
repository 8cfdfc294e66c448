"""Training loops: diffusion pre-training, adapter fine-tuning, baselines.

Every step derives its randomness (batch indices, patch origins,
timesteps, noise draws) from (seed, stream tag, global step index), so
a resumed run consumes exactly the same streams as an uninterrupted one
and losses reproduce bit-identically. Optimizer moments are serialized
alongside the weights for the same reason.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .controlnet import ControlAdapter3d, finetune_step
from .diffusion import NoiseSchedule, eps_matching_loss
from .errors import NumericError, ParameterError
from .seeding import torch_generator
from .unet import UNet3d

LogFn = Callable[[int, float], None]


def _random_patch_batch(
    volumes: Sequence[np.ndarray],
    batch_size: int,
    patch_edge: int,
    generator: torch.Generator,
    paired: Optional[Sequence[np.ndarray]] = None,
):
    """Stack a batch of random cubic patches as (B, 1, E, E, E) tensors."""
    idx = torch.randint(len(volumes), (batch_size,), generator=generator)
    xs, ys = [], []
    for i in idx.tolist():
        vol = volumes[i]
        origin = []
        for d in vol.shape:
            if d < patch_edge:
                raise ParameterError(f"volume dim {d} smaller than patch edge {patch_edge}")
            hi = d - patch_edge
            origin.append(int(torch.randint(hi + 1, (1,), generator=generator)) if hi else 0)
        sl = tuple(slice(o, o + patch_edge) for o in origin)
        xs.append(torch.from_numpy(vol[sl].copy()))
        if paired is not None:
            ys.append(torch.from_numpy(paired[i][sl].copy()))
    x = torch.stack(xs)[:, None]
    if paired is None:
        return x
    return x, torch.stack(ys)[:, None]


def _check_finite(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss at step {step}")


def pretrain_diffusion(
    net: UNet3d,
    volumes: Sequence[np.ndarray],
    sched: NoiseSchedule,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
    start_step: int = 0,
    log: Optional[LogFn] = None,
    log_every: int = 50,
) -> tuple[torch.optim.Optimizer, list[float]]:
    """Unconditional noise-matching training on clean volumes."""
    if optimizer is None:
        optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    patch_edge = net.config.patch_edge
    losses = []
    for step in range(start_step, start_step + steps):
        gen = torch_generator(seed, "pretrain", step)
        x0 = _random_patch_batch(volumes, batch_size, patch_edge, gen)
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        optimizer.zero_grad(set_to_none=True)
        loss = eps_matching_loss(net, x0, t, eps, sched)
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        _check_finite(value, step)
        losses.append(value)
        if log and (step % log_every == 0 or step == start_step + steps - 1):
            log(step, value)
    return optimizer, losses


def train_conditional_diffusion(
    net: UNet3d,
    pairs_x0: Sequence[np.ndarray],
    pairs_y: Sequence[np.ndarray],
    sched: NoiseSchedule,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    log: Optional[LogFn] = None,
    log_every: int = 50,
) -> list[float]:
    """From-scratch conditional diffusion: y concatenated as a second channel."""
    if net.config.in_channels != 2:
        raise ParameterError("conditional diffusion baseline requires in_channels=2")
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    patch_edge = net.config.patch_edge

    def model(x_t, t, cond):
        return net(torch.cat([x_t, cond], dim=1), t)

    losses = []
    for step in range(steps):
        gen = torch_generator(seed, "train-conddpm", step)
        x0, y = _random_patch_batch(pairs_x0, batch_size, patch_edge, gen, paired=pairs_y)
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        optimizer.zero_grad(set_to_none=True)
        loss = eps_matching_loss(model, x0, t, eps, sched, condition=y)
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        _check_finite(value, step)
        losses.append(value)
        if log and (step % log_every == 0 or step == steps - 1):
            log(step, value)
    return losses


def train_supervised_regressor(
    net: UNet3d,
    pairs_x0: Sequence[np.ndarray],
    pairs_y: Sequence[np.ndarray],
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    log: Optional[LogFn] = None,
    log_every: int = 50,
) -> list[float]:
    """Direct y -> x0 regression with the same backbone (timestep pinned to 0)."""
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    patch_edge = net.config.patch_edge
    losses = []
    for step in range(steps):
        gen = torch_generator(seed, "train-unet", step)
        x0, y = _random_patch_batch(pairs_x0, batch_size, patch_edge, gen, paired=pairs_y)
        optimizer.zero_grad(set_to_none=True)
        pred = net(y, 0)
        loss = torch.mean((pred - x0) ** 2)
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        _check_finite(value, step)
        losses.append(value)
        if log and (step % log_every == 0 or step == steps - 1):
            log(step, value)
    return losses


def finetune_adapter(
    base: UNet3d,
    adapter: ControlAdapter3d,
    pairs_x0: Sequence[np.ndarray],
    pairs_y: Sequence[np.ndarray],
    sched: NoiseSchedule,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
    start_step: int = 0,
    log: Optional[LogFn] = None,
    log_every: int = 50,
) -> tuple[torch.optim.Optimizer, list[float]]:
    """Fine-tune adapter parameters against a frozen base."""
    if optimizer is None:
        optimizer = torch.optim.Adam(adapter.parameters(), lr=lr)
    patch_edge = base.config.patch_edge
    losses = []
    for step in range(start_step, start_step + steps):
        gen = torch_generator(seed, "finetune", step)
        x0, y = _random_patch_batch(pairs_x0, batch_size, patch_edge, gen, paired=pairs_y)
        value = finetune_step(base, adapter, (x0, y), sched, optimizer, gen)
        _check_finite(value, step)
        losses.append(value)
        if log and (step % log_every == 0 or step == start_step + steps - 1):
            log(step, value)
    return optimizer, losses


def optimizer_tensors(
    optimizer: torch.optim.Optimizer, named_params: list[tuple[str, torch.Tensor]]
) -> list[tuple[str, torch.Tensor]]:
    """Flatten Adam moments into named tensors for checkpointing."""
    out = []
    for name, p in named_params:
        state = optimizer.state.get(p)
        if not state:
            continue
        out.append((f"opt.{name}.step", state["step"].reshape(1)))
        out.append((f"opt.{name}.exp_avg", state["exp_avg"]))
        out.append((f"opt.{name}.exp_avg_sq", state["exp_avg_sq"]))
    return out


def restore_optimizer(
    optimizer: torch.optim.Optimizer,
    named_params: list[tuple[str, torch.Tensor]],
    tensors: dict[str, np.ndarray],
) -> None:
    """Inverse of optimizer_tensors; missing entries leave fresh state."""
    for name, p in named_params:
        key = f"opt.{name}.step"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.from_numpy(tensors[key].copy()).reshape(()).float(),
            "exp_avg": torch.from_numpy(tensors[f"opt.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"].copy()),
        }
