"""Joint sampling of (image, mask) pairs from one shared Gaussian latent.

Both reverse chains start from the same x_T. With ``shared_step_noise`` on
(the default) the DDPM chains also share every injected noise grid z_t, so
the only thing that differs between them is the network that predicts the
noise. The mask is decoded by thresholding the mask chain's output at 0.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .denoiser import check_finite
from .errors import NumericFailure, ValidationError
from .metrics import dice
from .phantom import PhantomConfig, mask_pixels, oracle_segment, to_pixels, write_pgm
from .rng import normal, stream
from .trainer import DdmmModel

logger = logging.getLogger(__name__)

SAMPLER_KINDS = ("ddpm", "ddim")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddpm"
    ddim_steps: int = 10
    eta: float = 0.0
    shared_step_noise: bool = True
    clamp: bool = True
    base_seed: int = 0
    chunk_size: int = 16

    def __post_init__(self) -> None:
        if self.kind not in SAMPLER_KINDS:
            raise ValidationError(f"sampler kind must be one of {SAMPLER_KINDS}; got {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError(f"eta must be in [0, 1]; got {self.eta}")
        if self.chunk_size < 1 or self.base_seed < 0:
            raise ValidationError("chunk_size must be >= 1 and base_seed >= 0")

    def steps_used(self, t_max: int) -> int:
        return t_max if self.kind == "ddpm" else self.ddim_steps


@dataclass
class SamplePair:
    image: torch.Tensor  # (1, H, W) in [-1, 1]
    mask_soft: torch.Tensor  # raw mask-chain output
    mask: torch.Tensor  # uint8 {0, 1}
    seed: int
    sampler_kind: str
    steps_used: int


def decode_mask(mask_soft: torch.Tensor) -> torch.Tensor:
    """Threshold at 0 in model space; 0 itself counts as foreground."""
    return (mask_soft >= 0).to(torch.uint8)


def _draws(seeds: Sequence[int], name: str, shape: Tuple[int, ...], dtype: torch.dtype, *counters: int) -> torch.Tensor:
    return torch.stack([normal(stream(s, name, *counters), shape, dtype) for s in seeds])


def _run_chains(
    model: DdmmModel, seeds: Sequence[int], cfg: SamplerConfig
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run both reverse chains for a chunk of seeds; returns (images, mask_soft) batches."""
    kernel, schedule = model.kernel, model.schedule
    dtype = next(model.image_net.parameters()).dtype
    shape = (model.arch.in_channels, model.size, model.size)
    x_img = _draws(seeds, "sampler", shape, dtype, 0)
    x_mask = x_img.clone()
    if cfg.kind == "ddpm":
        for t in range(schedule.t_max, 0, -1):
            eps_img = model.image_net(x_img, t)
            eps_mask = model.mask_net(x_mask, t)
            if t > 1:
                z_img = _draws(seeds, "sampler", shape, dtype, 1, t)
                z_mask = z_img if cfg.shared_step_noise else _draws(seeds, "mask-step", shape, dtype, t)
            else:
                z_img = z_mask = torch.zeros_like(x_img)
            x_img = kernel.ddpm_reverse_step(x_img, t, eps_img, z_img, clamp=cfg.clamp)
            x_mask = kernel.ddpm_reverse_step(x_mask, t, eps_mask, z_mask, clamp=cfg.clamp)
        return x_img, x_mask
    ts = schedule.ddim_timesteps(cfg.ddim_steps)
    for t, t_prev in zip(ts, ts[1:] + [0]):
        eps_img = model.image_net(x_img, t)
        eps_mask = model.mask_net(x_mask, t)
        z_img = z_mask = None
        if cfg.eta > 0 and t_prev > 0:
            z_img = _draws(seeds, "sampler", shape, dtype, 1, t)
            z_mask = z_img if cfg.shared_step_noise else _draws(seeds, "mask-step", shape, dtype, t)
        x_img = kernel.ddim_step(x_img, t, t_prev, eps_img, cfg.eta, z_img, clamp=cfg.clamp)
        x_mask = kernel.ddim_step(x_mask, t, t_prev, eps_mask, cfg.eta, z_mask, clamp=cfg.clamp)
    return x_img, x_mask


def _prepare(model: DdmmModel) -> None:
    check_finite(model.image_net, "image branch")
    check_finite(model.mask_net, "mask branch")


def sample_batch(model: DdmmModel, base_seed: int, n: int, cfg: Optional[SamplerConfig] = None, progress: bool = False) -> List[SamplePair]:
    """Sample ``n`` pairs; pair i uses seed ``base_seed + i``. Seeds run in chunks of ``cfg.chunk_size``."""
    cfg = cfg or SamplerConfig()
    if n < 1:
        raise ValidationError(f"n must be at least 1; got {n}")
    if base_seed < 0:
        raise ValidationError(f"base_seed must be nonnegative; got {base_seed}")
    if cfg.kind == "ddim":
        model.schedule.ddim_timesteps(cfg.ddim_steps)
    _prepare(model)
    pairs: List[SamplePair] = []
    seeds = list(range(base_seed, base_seed + n))
    steps = cfg.steps_used(model.schedule.t_max)
    with torch.no_grad():
        for start in tqdm(range(0, n, cfg.chunk_size), desc="sample", disable=not progress):
            chunk = seeds[start:start + cfg.chunk_size]
            images, soft = _run_chains(model, chunk, cfg)
            if not (bool(torch.isfinite(images).all()) and bool(torch.isfinite(soft).all())):
                raise NumericFailure(f"sampling produced non-finite values for seeds {chunk[0]}..{chunk[-1]}")
            for k, seed in enumerate(chunk):
                pairs.append(SamplePair(images[k], soft[k], decode_mask(soft[k]), seed, cfg.kind, steps))
    return pairs


def sample_pair(
    model: DdmmModel,
    seed: int,
    sampler_kind: str = "ddpm",
    ddim_steps: int = 10,
    eta: float = 0.0,
    shared_step_noise: bool = True,
    clamp: bool = True,
) -> SamplePair:
    """Sample one jointly generated pair from ``seed``."""
    cfg = SamplerConfig(
        kind=sampler_kind, ddim_steps=ddim_steps, eta=eta,
        shared_step_noise=shared_step_noise, clamp=clamp, chunk_size=1,
    )
    return sample_batch(model, seed, 1, cfg)[0]


def consistency_scores(pairs: Sequence[SamplePair], phantom: Optional[PhantomConfig] = None, seed: int = 0) -> Tuple[float, float]:
    """Mean Dice of sampled masks against the oracle segmentation of their own
    image, and against the oracle segmentation of another pair's image
    (a seeded derangement)."""
    if len(pairs) < 2:
        raise ValidationError("consistency needs at least two pairs")
    oracle = [oracle_segment(p.image.double().numpy(), phantom) for p in pairs]
    masks = [p.mask.numpy() for p in pairs]
    matched = float(np.mean([dice(m, o) for m, o in zip(masks, oracle)]))
    n = len(pairs)
    shift = 1 + int(stream(seed, "pairing", 0).integers(0, n - 1))
    shuffled = float(np.mean([dice(masks[i], oracle[(i + shift) % n]) for i in range(n)]))
    return matched, shuffled


def save_pairs(pairs: Sequence[SamplePair], out_dir: Path) -> Path:
    """Write images/ and masks/ PGM files plus a ``pairs.csv`` manifest; returns the CSV path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "pairs.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "seed", "sampler", "steps", "image", "mask"])
        for p in pairs:
            name = f"sample-{p.seed:06d}"
            write_pgm(out_dir / "images" / f"{name}.pgm", to_pixels(p.image.double().numpy()))
            write_pgm(out_dir / "masks" / f"{name}.pgm", mask_pixels(p.mask.numpy()))
            writer.writerow([name, p.seed, p.sampler_kind, p.steps_used, f"images/{name}.pgm", f"masks/{name}.pgm"])
    logger.info("wrote %d pairs to %s", len(pairs), out_dir)
    return manifest
