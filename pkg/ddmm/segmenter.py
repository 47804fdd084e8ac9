"""Downstream segmentation: a plain UNet (no time conditioning) trained only on
generated pairs and scored on the held-out labeled test split."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from . import denoiser
from .denoiser import Arch, UNet
from .errors import NumericFailure, ValidationError
from .metrics import dice, rand_score
from .phantom import PairDataset, encode_mask, mask_pixels, write_pgm
from .rng import permutation, stream
from .sampler import SamplePair

logger = logging.getLogger(__name__)

SegNet = UNet
INIT_COUNTER = 2


@dataclass(frozen=True)
class SegConfig:
    base_channels: int = 16
    depth: int = 2
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError("segmenter needs epochs >= 0, batch_size >= 1 and a positive learning_rate")
        if self.seed < 0:
            raise ValidationError(f"seed must be nonnegative; got {self.seed}")

    @property
    def arch(self) -> Arch:
        return Arch(base_channels=self.base_channels, depth=self.depth, time_embed_dim=0)


def dataset_from_pairs(pairs: Sequence[SamplePair]) -> PairDataset:
    """Stack sampled pairs into a ``PairDataset`` named after their seeds."""
    if not pairs:
        raise ValidationError("no pairs to train on")
    images = np.stack([p.image.double().numpy() for p in pairs]).astype(np.float32)
    masks = np.stack([encode_mask(p.mask.numpy()) for p in pairs])
    return PairDataset(images, masks, [f"sample-{p.seed:06d}" for p in pairs])


def predict_masks(net: SegNet, images: torch.Tensor) -> torch.Tensor:
    """uint8 {0, 1} masks; sigmoid(logit) >= 0.5, so a zero logit is foreground."""
    with torch.no_grad():
        return (net(images) >= 0).to(torch.uint8)


def train_segmenter(data: PairDataset, config: Optional[SegConfig] = None, progress: bool = False) -> Tuple[SegNet, List[float]]:
    """Train with per-pixel BCE on logits and Adam; no augmentation. Returns the net and mean loss per epoch."""
    config = config or SegConfig()
    if data.masks is None or len(data) == 0:
        raise ValidationError("segmenter training needs a nonempty set of pairs with masks")
    net = denoiser.init(config.arch, config.seed, counter=INIT_COUNTER)
    net.check_input(torch.from_numpy(data.images[:1]))
    images = torch.from_numpy(data.images)
    targets = torch.from_numpy((data.masks > 0).astype(np.float32))
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    n = len(data)
    n_batches = math.ceil(n / config.batch_size)
    curve: List[float] = []
    for epoch in tqdm(range(1, config.epochs + 1), desc="train-seg", disable=not progress):
        order = torch.from_numpy(permutation(stream(config.seed, "segmenter", epoch), n))
        total = 0.0
        for step in range(n_batches):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            opt.zero_grad(set_to_none=True)
            loss = F.binary_cross_entropy_with_logits(net(images[idx]), targets[idx])
            if not torch.isfinite(loss):
                raise NumericFailure(f"segmenter loss is not finite at epoch {epoch}, step {step + 1}")
            loss.backward()
            opt.step()
            total += float(loss)
        curve.append(total / n_batches)
        logger.info("segmenter epoch %d: bce %.5f", epoch, curve[-1])
    return net, curve


@dataclass
class SegEvaluation:
    dice_mean: float
    rand_mean: float
    rows: List[Tuple[str, float, float]] = field(default_factory=list)

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["name", "dice", "rand"])
            for name, d, r in self.rows:
                writer.writerow([name, repr(d), repr(r)])
            writer.writerow(["mean", repr(self.dice_mean), repr(self.rand_mean)])


def evaluate_segmenter(
    net: SegNet, test_set: PairDataset, dump_dir: Optional[Path] = None, adjusted_rand: bool = False
) -> SegEvaluation:
    """Per-image Dice and Rand of thresholded predictions against ``test_set`` masks."""
    if len(test_set) == 0 or test_set.masks is None:
        raise ValidationError("test set is empty or has no masks")
    truth = test_set.binary_masks()
    pred = predict_masks(net, torch.from_numpy(test_set.images)).numpy()
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for k, name in enumerate(test_set.names):
        rows.append((name, dice(pred[k], truth[k]), rand_score(pred[k], truth[k], adjusted=adjusted_rand)))
        if dump_dir is not None:
            write_pgm(Path(dump_dir) / f"{name.replace(':', '-')}.pgm", mask_pixels(pred[k]))
    return SegEvaluation(
        dice_mean=float(np.mean([r[1] for r in rows])),
        rand_mean=float(np.mean([r[2] for r in rows])),
        rows=rows,
    )
