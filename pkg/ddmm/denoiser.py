"""The noise-prediction UNet used by each diffusion branch (and, without time
conditioning, by the downstream segmenter).

Architecture, for ``depth`` stages:
    * sinusoidal embedding of the integer timestep, then Linear -> SiLU -> Linear
    * encoder: per stage a ``ConvBlock`` (3x3 conv, GroupNorm, SiLU, added
      time projection, 3x3 conv, GroupNorm, SiLU), a skip, 2x average pooling
    * bottleneck ``ConvBlock`` at base_channels * 2**depth
    * decoder: 2x nearest upsampling, concatenation with the matching skip,
      ``ConvBlock``
    * final 3x3 convolution to ``out_channels``, zero-initialized

Gradients are exact reverse-mode derivatives from ``torch.autograd``; every
nonlinearity is smooth (SiLU, GroupNorm), so central finite differences
agree with them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericFailure, ValidationError
from .rng import stream

GradientSet = Dict[str, torch.Tensor]


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor. ``time_embed_dim = 0`` builds an unconditioned net."""

    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self) -> None:
        if self.base_channels < 1 or self.depth < 0 or self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError(f"invalid architecture {self}")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ValidationError(f"time_embed_dim must be a nonnegative even number; got {self.time_embed_dim}")

    @property
    def time_conditioned(self) -> bool:
        return self.time_embed_dim > 0

    def stage_channels(self) -> List[int]:
        """Channels of encoder stages 0..depth-1 followed by the bottleneck."""
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Geometric-frequency sin/cos embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.time = nn.Linear(time_dim, cout) if time_dim else None
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)

    def forward(self, x: torch.Tensor, emb: Optional[torch.Tensor]) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        if self.time is not None and emb is not None:
            h = h + self.time(F.silu(emb))[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class UNet(nn.Module):
    """Encoder/decoder with skip concatenation and optional time conditioning."""

    def __init__(self, arch: Arch) -> None:
        super().__init__()
        self.arch = arch
        td = arch.time_embed_dim
        chans = arch.stage_channels()
        if arch.time_conditioned:
            self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        else:
            self.time_mlp = None
        cin = arch.in_channels
        self.down = nn.ModuleList()
        for c in chans[:-1]:
            self.down.append(ConvBlock(cin, c, td))
            cin = c
        self.mid = ConvBlock(cin, chans[-1], td)
        self.up = nn.ModuleList()
        below = chans[-1]
        for c in reversed(chans[:-1]):
            self.up.append(ConvBlock(below + c, c, td))
            below = c
        self.out = nn.Conv2d(below, arch.out_channels, 3, padding=1)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.arch.in_channels:
            raise ValidationError(f"expected a (B, {self.arch.in_channels}, H, W) batch; got {tuple(x.shape)}")
        h, w = int(x.shape[-2]), int(x.shape[-1])
        step = 2 ** self.arch.depth
        if h != w or h % step:
            raise ValidationError(f"spatial dims must be square and divisible by {step}; got {h}x{w}")

    def forward(self, x: torch.Tensor, t: Optional[Union[int, torch.Tensor]] = None) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        self.check_input(x)
        emb = None
        if self.time_mlp is not None:
            if t is None:
                raise ValidationError("a time-conditioned net needs a timestep")
            tt = torch.as_tensor(t, dtype=torch.int64)
            if tt.dim() == 0:
                tt = tt.expand(x.shape[0])
            if int(tt.min()) < 1:
                raise ValidationError(f"timesteps start at 1; got {int(tt.min())}")
            emb = self.time_mlp(sinusoidal_embedding(tt, self.arch.time_embed_dim).to(x.dtype))
        skips = []
        h = x
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        out = self.out(h)
        return out.squeeze(0) if squeeze else out


DenoiserNet = UNet


def parameter_count(arch: Arch) -> int:
    """Closed-form parameter count of ``UNet(arch)``."""
    td = arch.time_embed_dim

    def block(cin: int, cout: int) -> int:
        n = 9 * cin * cout + cout + 2 * cout + 9 * cout * cout + cout + 2 * cout
        return n + (td * cout + cout if td else 0)

    chans = arch.stage_channels()
    total = 2 * (td * td + td) if td else 0
    cin = arch.in_channels
    for c in chans[:-1]:
        total += block(cin, c)
        cin = c
    total += block(cin, chans[-1])
    below = chans[-1]
    for c in reversed(chans[:-1]):
        total += block(below + c, c)
        below = c
    return total + 9 * below * arch.out_channels + arch.out_channels


def _uniform(gen: np.random.Generator, param: torch.Tensor, bound: float) -> None:
    draw = gen.uniform(-bound, bound, size=tuple(param.shape))
    param.copy_(torch.from_numpy(draw).to(param.dtype))


def init(arch: Arch, rng_seed: int, counter: int = 0) -> UNet:
    """Build a ``UNet`` and draw every parameter from the ``init`` stream.

    Conv and linear weights are uniform in +-1/sqrt(fan_in); biases are zero;
    GroupNorm scales are one and shifts zero; the output conv is all zeros, so
    an untrained net predicts zero noise. ``counter`` separates the branches
    of one model.
    """
    net = UNet(arch)
    gen = stream(rng_seed, "init", counter)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                if module is net.out:
                    module.weight.zero_()
                else:
                    fan_in = module.weight[0].numel()
                    _uniform(gen, module.weight, 1.0 / math.sqrt(fan_in))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return net


def backward(
    net: UNet,
    xt: torch.Tensor,
    t: Optional[Union[int, torch.Tensor]],
    loss_grad_wrt_output: torch.Tensor,
    output: Optional[torch.Tensor] = None,
) -> GradientSet:
    """Exact gradients of a scalar loss w.r.t. every parameter of ``net``.

    ``loss_grad_wrt_output`` is dL/d(net(xt, t)). ``output`` may be the
    still-attached result of an earlier forward pass with the same inputs;
    without it the forward pass is recomputed.
    """
    if output is None:
        with torch.enable_grad():
            output = net(xt, t)
    if output.shape != loss_grad_wrt_output.shape:
        raise ValidationError(
            f"gradient shape {tuple(loss_grad_wrt_output.shape)} does not match output shape {tuple(output.shape)}"
        )
    names = [n for n, _ in net.named_parameters()]
    params = [p for _, p in net.named_parameters()]
    grads = torch.autograd.grad(output, params, grad_outputs=loss_grad_wrt_output, allow_unused=True)
    result: GradientSet = {}
    for name, p, g in zip(names, params, grads):
        result[name] = torch.zeros_like(p) if g is None else g.detach()
    return result


def check_finite(net: nn.Module, what: str) -> None:
    """Raise NumericFailure if any parameter of ``net`` is NaN or infinite."""
    for name, p in net.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise NumericFailure(f"{what}: parameter {name} is not finite")


def param_checksum(net: nn.Module) -> str:
    """SHA-256 over every parameter's bytes, in registration order."""
    digest = hashlib.sha256()
    for name, p in net.named_parameters():
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
