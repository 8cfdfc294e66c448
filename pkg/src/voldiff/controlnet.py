"""Zero-convolution control adapter for conditioning a frozen UNet.

The adapter holds trainable deep copies of the base network's input
layer and encoder plus 1x1x1 "zero convolutions" whose weights and
biases start at exactly zero. The conditioning volume y enters only
through the adapter:

    m  = Z_in(input_copy(y)) + input_layer(x_t)
    f' = Z_out(encoder_copy(m)) + f_t
    skip'_l = skips_l + Z_skip_l(copy skips_l)      per resolution level

and f' / skip' feed the frozen middle, decoder, and output layer. At
initialization every Z is zero, so the controlled forward pass equals
the base forward pass exactly and fine-tuning starts from an unharmed
pre-trained model. The base stays frozen throughout; `freeze_check`
audits that bit-exactly via parameter digests.
"""

from __future__ import annotations

import torch
from torch import nn

from .checkpoint import parameter_digest
from .diffusion import NoiseSchedule, eps_matching_loss
from .errors import ContractViolationError, ParameterError, ShapeError
from .unet import UNet3d


class ControlAdapter3d(nn.Module):
    """Trainable input/encoder copies joined to a frozen base by zero convs."""

    def __init__(self, base: UNet3d):
        super().__init__()
        self.config = base.config
        chans = base.config.level_channels
        self.input_copy, self.encoder_copy = base.clone_input_and_encoder()
        self.z_in = self._zero_conv(chans[0])
        self.z_out = self._zero_conv(chans[-1])
        self.z_skips = nn.ModuleList(self._zero_conv(c) for c in chans[:-1])
        self.base_digest = parameter_digest(base)

    @staticmethod
    def _zero_conv(channels: int) -> nn.Conv3d:
        conv = nn.Conv3d(channels, channels, 1)
        with torch.no_grad():
            conv.weight.zero_()
            conv.bias.zero_()
        return conv


def init_adapter(base: UNet3d) -> ControlAdapter3d:
    """Clone the base's input layer and encoder; freeze the base."""
    adapter = ControlAdapter3d(base)
    base.freeze()
    return adapter


def controlled_forward(
    base: UNet3d,
    adapter: ControlAdapter3d,
    x_t: torch.Tensor,
    t,
    y: torch.Tensor,
) -> torch.Tensor:
    """Noise prediction for x_t conditioned on y through the adapter."""
    if y.shape != x_t.shape:
        raise ShapeError(f"condition shape {tuple(y.shape)} != input shape {tuple(x_t.shape)}")
    temb = base.embed_time(t)
    if temb.shape[0] == 1 and x_t.shape[0] > 1:
        temb = temb.expand(x_t.shape[0], -1)
    base._check_input(x_t)

    hx = base.input_layer(x_t)
    m = adapter.z_in(adapter.input_copy(y)) + hx
    bottom_c, skips_c = adapter.encoder_copy(m, temb)
    bottom_b, skips_b = base.encoder(hx, temb)

    bottom = adapter.z_out(bottom_c) + bottom_b
    skips = [sb + z(sc) for sb, sc, z in zip(skips_b, skips_c, adapter.z_skips)]
    return base.decode(bottom, skips, temb)


def finetune_step(
    base: UNet3d,
    adapter: ControlAdapter3d,
    batch: tuple[torch.Tensor, torch.Tensor],
    sched: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
) -> float:
    """One noise-matching gradient step on adapter parameters only.

    batch is (x0, y) with shapes (B, 1, D, H, W); timesteps are drawn
    uniformly per example from the generator.
    """
    if not base.frozen:
        raise ContractViolationError("base network must be frozen before fine-tuning")
    x0, y = batch
    if x0.shape != y.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != y shape {tuple(y.shape)}")
    t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)

    def model(x_t, t_vec, cond):
        return controlled_forward(base, adapter, x_t, t_vec, cond)

    optimizer.zero_grad(set_to_none=True)
    loss = eps_matching_loss(model, x0, t, eps, sched, condition=y)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def freeze_check(base: UNet3d, snapshot_digest: str) -> bool:
    """True iff every base parameter is bit-identical to the snapshot."""
    if not snapshot_digest:
        raise ParameterError("empty snapshot digest")
    return parameter_digest(base) == snapshot_digest
