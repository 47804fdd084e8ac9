"""Pure diffusion mathematics on Grids: forward noising, the forward-process
posterior, DDPM and DDIM reverse steps, and the variational-bound loss terms.

A Grid is a torch tensor shaped (C, H, W). Every operation also accepts a
batch shaped (B, C, H, W); the timestep is then either one int for the whole
batch or an int64 tensor of shape (B,). Noise is always an explicit argument,
so every method here is a deterministic function of its inputs.

Loss terms (``loss_prior``, ``loss_step``, ``loss_decoder``) are summed over
every element they are given, in nats. ``loss_simple`` is a mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Union

import numpy as np
import torch

from .errors import ValidationError
from .rng import normal
from .schedule import NoiseSchedule

Timestep = Union[int, torch.Tensor]
Predictor = Callable[[torch.Tensor, Timestep], torch.Tensor]


@dataclass
class ReverseStepParams:
    """Mean and isotropic variance of one Gaussian reverse transition."""

    mean: torch.Tensor
    variance: float


@dataclass
class VlbTerms:
    """The variational bound split into its decoder, per-step and prior terms."""

    decoder: float
    steps: List[float]  # KL terms for t = 2..T, in that order
    prior: float

    @property
    def total(self) -> float:
        return self.decoder + math.fsum(self.steps) + self.prior


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


class DiffusionKernel:
    """Diffusion operations bound to one ``NoiseSchedule``."""

    def __init__(self, schedule: NoiseSchedule) -> None:
        self.schedule = schedule
        self._bars = schedule.alpha_bars_from_zero  # index t gives alpha_bar_t, t = 0..T

    # ----- coefficient lookup -----

    def _coef(self, values: np.ndarray, t: Timestep, like: torch.Tensor, lowest: int = 1) -> Union[float, torch.Tensor]:
        """Return ``values[t]`` as a float (int t) or a (B,1,1,1) tensor (vector t).

        ``values`` must be indexable by t directly (callers pass arrays padded
        with the t = 0 entry).
        """
        if isinstance(t, torch.Tensor) and t.dim() > 0:
            if like.dim() != 4 or t.shape[0] != like.shape[0]:
                raise ValidationError("per-sample timesteps need a (B, C, H, W) batch with B matching len(t)")
            lo, hi = int(t.min()), int(t.max())
            if lo < lowest or hi > self.schedule.t_max:
                raise ValidationError(f"timestep must be in [{lowest}, {self.schedule.t_max}]; got range [{lo}, {hi}]")
            picked = torch.from_numpy(np.ascontiguousarray(values[t.cpu().numpy()]))
            return picked.to(like.dtype).view(-1, 1, 1, 1)
        return float(values[self.schedule.check_t(int(t), lowest=lowest)])

    def _padded(self, values: np.ndarray) -> np.ndarray:
        return np.concatenate(([0.0], values))

    # ----- forward process -----

    def forward_step(self, x_prev: torch.Tensor, t: Timestep, eps: torch.Tensor) -> torch.Tensor:
        """Reparameterized draw from q(x_t | x_{t-1})."""
        _same_shape(x_prev, eps, "forward_step")
        beta = self._coef(self._padded(self.schedule.betas), t, x_prev)
        if isinstance(beta, float):
            return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * eps
        return torch.sqrt(1.0 - beta) * x_prev + torch.sqrt(beta) * eps

    def forward_jump(self, x0: torch.Tensor, t: Timestep, eps: torch.Tensor) -> torch.Tensor:
        """Closed-form draw from q(x_t | x_0)."""
        _same_shape(x0, eps, "forward_jump")
        bar = self._coef(self._bars, t, x0)
        if isinstance(bar, float):
            return math.sqrt(bar) * x0 + math.sqrt(1.0 - bar) * eps
        return torch.sqrt(bar) * x0 + torch.sqrt(1.0 - bar) * eps

    # ----- posterior and inversion -----

    def posterior(self, x0: torch.Tensor, xt: torch.Tensor, t: int) -> ReverseStepParams:
        """Mean and variance of q(x_{t-1} | x_t, x_0)."""
        _same_shape(x0, xt, "posterior")
        t = self.schedule.check_t(t)
        bar, bar_prev = self.schedule.alpha_bar(t), self.schedule.alpha_bar(t - 1)
        beta, alpha = self.schedule.beta(t), self.schedule.alpha(t)
        c0 = math.sqrt(bar_prev) * beta / (1.0 - bar)
        ct = math.sqrt(alpha) * (1.0 - bar_prev) / (1.0 - bar)
        return ReverseStepParams(mean=c0 * x0 + ct * xt, variance=self.schedule.posterior_variance(t))

    def eps_to_x0(self, xt: torch.Tensor, t: Timestep, eps_hat: torch.Tensor, clamp: bool = False) -> torch.Tensor:
        """Invert ``forward_jump`` given a noise estimate; optionally clamp to [-1, 1]."""
        _same_shape(xt, eps_hat, "eps_to_x0")
        bar = self._coef(self._bars, t, xt)
        if isinstance(bar, float):
            x0 = (xt - math.sqrt(1.0 - bar) * eps_hat) / math.sqrt(bar)
        else:
            x0 = (xt - torch.sqrt(1.0 - bar) * eps_hat) / torch.sqrt(bar)
        return x0.clamp(-1.0, 1.0) if clamp else x0

    # ----- reverse steps -----

    def ddpm_reverse_step(
        self,
        xt: torch.Tensor,
        t: int,
        eps_hat: torch.Tensor,
        z: Optional[torch.Tensor],
        clamp: bool = True,
    ) -> torch.Tensor:
        """One ancestral step x_t -> x_{t-1}. ``z`` must be zeros (or None) at t = 1."""
        t = self.schedule.check_t(t)
        if z is None:
            z = torch.zeros_like(xt)
        _same_shape(xt, z, "ddpm_reverse_step")
        if t == 1 and bool(torch.any(z != 0)):
            raise ValidationError("the final reverse step (t = 1) is deterministic; z must be zeros")
        x0_hat = self.eps_to_x0(xt, t, eps_hat, clamp=clamp)
        params = self.posterior(x0_hat, xt, t)
        if t == 1:
            return params.mean
        return params.mean + math.sqrt(params.variance) * z

    def ddim_sigma(self, t: int, t_prev: int, eta: float) -> float:
        """Noise scale of a DDIM step; eta = 1 with t_prev = t - 1 gives the DDPM posterior std."""
        bar, bar_prev = self.schedule.alpha_bar(t), self.schedule.alpha_bar(t_prev)
        return eta * math.sqrt((1.0 - bar_prev) / (1.0 - bar)) * math.sqrt(1.0 - bar / bar_prev)

    def ddim_step(
        self,
        xt: torch.Tensor,
        t: int,
        t_prev: int,
        eps_hat: torch.Tensor,
        eta: float = 0.0,
        z: Optional[torch.Tensor] = None,
        clamp: bool = True,
    ) -> torch.Tensor:
        """One DDIM step x_t -> x_{t_prev}; t_prev = 0 returns the x0 estimate."""
        t = self.schedule.check_t(t)
        t_prev = self.schedule.check_t(t_prev, lowest=0)
        if t_prev >= t:
            raise ValidationError(f"ddim_step needs t_prev < t; got t={t}, t_prev={t_prev}")
        if not 0.0 <= eta <= 1.0:
            raise ValidationError(f"eta must be in [0, 1]; got {eta}")
        x0_hat = self.eps_to_x0(xt, t, eps_hat, clamp=clamp)
        bar_prev = self.schedule.alpha_bar(t_prev)
        sigma = self.ddim_sigma(t, t_prev, eta)
        direction = math.sqrt(max(1.0 - bar_prev - sigma * sigma, 0.0))
        out = math.sqrt(bar_prev) * x0_hat + direction * eps_hat
        if sigma > 0.0:
            if z is None:
                raise ValidationError("ddim_step with eta > 0 needs a noise grid z")
            _same_shape(xt, z, "ddim_step")
            out = out + sigma * z
        return out

    # ----- loss terms -----

    def loss_prior(self, x0: torch.Tensor) -> torch.Tensor:
        """KL(q(x_T | x_0) || N(0, I)), summed over elements."""
        bar = self.schedule.alpha_bar(self.schedule.t_max)
        return (0.5 * (bar * x0 * x0 + (1.0 - bar) - 1.0 - math.log(1.0 - bar))).sum()

    def loss_step(self, x0: torch.Tensor, xt: torch.Tensor, t: int, eps_hat: torch.Tensor) -> torch.Tensor:
        """KL(q(x_{t-1} | x_t, x_0) || p(x_{t-1} | x_t)) for t >= 2, summed over elements."""
        t = self.schedule.check_t(t)
        if t < 2:
            raise ValidationError("loss_step needs t >= 2; the t = 1 term is loss_decoder")
        mu_q = self.posterior(x0, xt, t)
        mu_p = self.posterior(self.eps_to_x0(xt, t, eps_hat), xt, t)
        diff = mu_q.mean - mu_p.mean
        return (diff * diff).sum() / (2.0 * mu_q.variance)

    def loss_decoder(self, x0: torch.Tensor, x1: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
        """Negative Gaussian log-density of x0 under N(x0_hat(x1), beta_1 I), summed over elements."""
        _same_shape(x0, x1, "loss_decoder")
        beta = self.schedule.beta(1)
        mu = self.eps_to_x0(x1, 1, eps_hat)
        resid = x0 - mu
        return (0.5 * (resid * resid / beta + math.log(2.0 * math.pi * beta))).sum()

    @staticmethod
    def loss_simple(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
        """Mean squared error between the true and predicted noise."""
        _same_shape(eps, eps_hat, "loss_simple")
        return torch.mean((eps - eps_hat) ** 2)

    def vlb(self, x0: torch.Tensor, predict: Predictor, gen: np.random.Generator) -> VlbTerms:
        """Evaluate every bound term once, drawing one noise grid per timestep from ``gen``."""
        decoder = 0.0
        steps: List[float] = []
        with torch.no_grad():
            for t in range(1, self.schedule.t_max + 1):
                eps = normal(gen, x0.shape, x0.dtype)
                xt = self.forward_jump(x0, t, eps)
                eps_hat = predict(xt, t)
                if t == 1:
                    decoder = float(self.loss_decoder(x0, xt, eps_hat))
                else:
                    steps.append(float(self.loss_step(x0, xt, t, eps_hat)))
            prior = float(self.loss_prior(x0))
        return VlbTerms(decoder=decoder, steps=steps, prior=prior)
