"""Two-branch training: an image branch and a mask branch that share one noise
schedule and, within every supervised step, one timestep and one noise grid.

Implementation notes:
    * ``supervised_step`` corrupts the image and its mask with the SAME (t, eps)
      drawn from the supervised stream; ``unsupervised_step`` corrupts unlabeled
      images with (t, eps) from the unsupervised stream and only ever touches
      the image branch.
    * Both streams are derived per epoch from their own seeds, so how many
      unsupervised draws an epoch makes never changes the supervised draws.
    * Each epoch pairs every labeled batch with a proportional slice of the
      unlabeled pool, so both sets are consumed once per epoch. The slice
      enters that step as one mean loss; there are no unlabeled-only updates.
    * Gradients come from ``denoiser.backward``; one ``torch.optim.Adam`` per
      branch applies them.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from . import denoiser
from .denoiser import Arch, GradientSet, UNet
from .errors import NumericFailure, ValidationError
from .kernel import DiffusionKernel
from .phantom import PairDataset
from .rng import normal, permutation, stream, timesteps
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

NoiseHook = Callable[[str, torch.Tensor, torch.Tensor], None]


@dataclass(eq=False)
class DdmmModel:
    """Image branch (p_theta) and mask branch (p_phi) on one shared schedule."""

    image_net: UNet
    mask_net: UNet
    schedule: NoiseSchedule
    size: int
    epoch: int = 0
    kernel: DiffusionKernel = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.image_net.arch != self.mask_net.arch:
            raise ValidationError("both branches must share one architecture")
        step = 2 ** self.image_net.arch.depth
        if self.size % step:
            raise ValidationError(f"image size {self.size} is not divisible by {step}")
        self.kernel = DiffusionKernel(self.schedule)

    @classmethod
    def create(cls, arch: Arch, schedule: NoiseSchedule, size: int, seed: int) -> "DdmmModel":
        return cls(
            image_net=denoiser.init(arch, seed, counter=0),
            mask_net=denoiser.init(arch, seed, counter=1),
            schedule=schedule,
            size=size,
        )

    @property
    def arch(self) -> Arch:
        return self.image_net.arch

    def branches(self) -> List[Tuple[str, UNet]]:
        """Named branches. A third branch would be added here and in ``supervised_step``."""
        return [("image", self.image_net), ("mask", self.mask_net)]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    lambda_unsup: float = 1.0
    seed_supervised: int = 1
    seed_unsupervised: int = 2
    seed_shuffle: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    vlb_every: int = 10
    vlb_probe: int = 8
    vlb_seed: int = 4
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.seed_supervised == self.seed_unsupervised:
            raise ValidationError("seed_supervised and seed_unsupervised must differ")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("learning_rate must be positive, batch_size >= 1 and epochs >= 0")
        if self.lambda_unsup < 0:
            raise ValidationError(f"lambda_unsup must be nonnegative; got {self.lambda_unsup}")
        for seed in (self.seed_supervised, self.seed_unsupervised, self.seed_shuffle, self.vlb_seed):
            if seed < 0:
                raise ValidationError(f"seeds must be nonnegative; got {seed}")


class OptimState:
    """One Adam optimizer per branch plus the shared step counter."""

    def __init__(self, model: DdmmModel, config: TrainConfig) -> None:
        betas = (config.adam_beta1, config.adam_beta2)
        self.optimizers = {
            name: torch.optim.Adam(net.parameters(), lr=config.learning_rate, betas=betas, eps=config.adam_eps)
            for name, net in model.branches()
        }
        self.nets = dict(model.branches())
        self.step = 0

    def apply(self, name: str, grads: GradientSet) -> None:
        """Install ``grads`` on branch ``name`` and take one Adam step."""
        net = self.nets[name]
        for pname, p in net.named_parameters():
            p.grad = grads[pname].to(p.dtype).clone()
        self.optimizers[name].step()
        self.optimizers[name].zero_grad(set_to_none=True)

    def moments(self, name: str) -> List[Tuple[str, torch.Tensor, torch.Tensor, int]]:
        """(parameter name, first moment, second moment, step) for every parameter with state."""
        opt = self.optimizers[name]
        rows = []
        for pname, p in self.nets[name].named_parameters():
            state = opt.state.get(p)
            if state:
                rows.append((pname, state["exp_avg"], state["exp_avg_sq"], int(state["step"])))
        return rows

    def restore(self, name: str, rows: List[Tuple[str, torch.Tensor, torch.Tensor, int]]) -> None:
        opt = self.optimizers[name]
        params = dict(self.nets[name].named_parameters())
        for pname, m, v, step in rows:
            p = params[pname]
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": m.to(p.dtype).clone(),
                "exp_avg_sq": v.to(p.dtype).clone(),
            }


@dataclass
class SupervisedResult:
    loss_image: torch.Tensor
    loss_mask: torch.Tensor
    grads_image: GradientSet
    grads_mask: GradientSet

    @property
    def loss(self) -> float:
        return float(self.loss_image) + float(self.loss_mask)


@dataclass
class BatchReport:
    loss_sup_img: float
    loss_sup_mask: float
    loss_unsup: Optional[float]
    total: float


@dataclass
class EpochRecord:
    epoch: int
    loss_sup_img: float
    loss_sup_mask: float
    loss_unsup: Optional[float]
    vlb_img: Optional[float]


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "loss_sup_img", "loss_sup_mask", "loss_unsup", "vlb_img")

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch] + [_fmt(v) for v in (r.loss_sup_img, r.loss_sup_mask, r.loss_unsup, r.vlb_img)])


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _branch_loss(
    model: DdmmModel, net: UNet, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor
) -> Tuple[torch.Tensor, GradientSet]:
    """loss_simple(eps, net(forward_jump(x0, t, eps), t)) and its parameter gradients."""
    xt = model.kernel.forward_jump(x0, t, eps)
    with torch.enable_grad():
        out = net(xt, t)
        loss = model.kernel.loss_simple(eps, out)
        (grad_out,) = torch.autograd.grad(loss, out, retain_graph=True)
        grads = denoiser.backward(net, xt, t, grad_out, output=out)
    return loss.detach(), grads


def supervised_step(
    model: DdmmModel,
    image: torch.Tensor,
    mask: torch.Tensor,
    rng_sup: np.random.Generator,
    hook: Optional[NoiseHook] = None,
) -> SupervisedResult:
    """Corrupt image and mask with one shared (t, eps); return both losses and gradient sets."""
    image, mask = _as_batch(image), _as_batch(mask)
    if image.shape != mask.shape:
        raise ValidationError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} shapes differ")
    if not bool(((mask == 1.0) | (mask == -1.0)).all()):
        raise ValidationError("masks must be in the model encoding {-1, +1}")
    t = timesteps(rng_sup, image.shape[0], model.schedule.t_max)
    eps = normal(rng_sup, image.shape, image.dtype)
    if hook is not None:
        hook("image", t, eps)
        hook("mask", t, eps)
    loss_img, grads_img = _branch_loss(model, model.image_net, image, t, eps)
    loss_mask, grads_mask = _branch_loss(model, model.mask_net, mask, t, eps)
    return SupervisedResult(loss_img, loss_mask, grads_img, grads_mask)


def unsupervised_step(
    model: DdmmModel, image: torch.Tensor, rng_unsup: np.random.Generator
) -> Tuple[torch.Tensor, GradientSet]:
    """Image-branch-only step with its own (t, eps) draws."""
    image = _as_batch(image)
    t = timesteps(rng_unsup, image.shape[0], model.schedule.t_max)
    eps = normal(rng_unsup, image.shape, image.dtype)
    return _branch_loss(model, model.image_net, image, t, eps)


def train_batch(
    model: DdmmModel,
    labeled_batch: Tuple[torch.Tensor, torch.Tensor],
    unlabeled_batch: Optional[torch.Tensor],
    config: TrainConfig,
    optim: OptimState,
    rng_sup: np.random.Generator,
    rng_unsup: np.random.Generator,
    hook: Optional[NoiseHook] = None,
) -> BatchReport:
    """One combined update: supervised loss + lambda_unsup * unsupervised loss.

    The unlabeled batch contributes one mean loss however many images it holds.
    A non-finite loss raises NumericFailure before either branch is updated.
    """
    images, masks = labeled_batch
    if images.shape[0] == 0:
        raise ValidationError("train_batch needs a nonempty labeled batch")
    sup = supervised_step(model, images, masks, rng_sup, hook=hook)
    grads_img = sup.grads_image
    loss_unsup: Optional[float] = None
    if unlabeled_batch is not None and unlabeled_batch.shape[0] > 0 and config.lambda_unsup > 0:
        loss_u, grads_u = unsupervised_step(model, unlabeled_batch, rng_unsup)
        loss_unsup = float(loss_u)
        grads_img = {k: g + config.lambda_unsup * grads_u[k] for k, g in grads_img.items()}
    total = sup.loss + (config.lambda_unsup * loss_unsup if loss_unsup is not None else 0.0)
    if not math.isfinite(total):
        raise NumericFailure(f"non-finite loss (image {float(sup.loss_image)}, mask {float(sup.loss_mask)}, unlabeled {loss_unsup})")
    optim.apply("image", grads_img)
    optim.apply("mask", sup.grads_mask)
    optim.step += 1
    return BatchReport(float(sup.loss_image), float(sup.loss_mask), loss_unsup, total)


def evaluate_vlb(model: DdmmModel, probe: torch.Tensor, seed: int) -> float:
    """Image-branch variational bound on ``probe``, nats per image, fixed noise."""
    net = model.image_net
    terms = model.kernel.vlb(_as_batch(probe), lambda xt, t: net(xt, t), stream(seed, "vlb"))
    return terms.total / _as_batch(probe).shape[0]


def _schedule_unlabeled(n_lab_batches: int, n_unl: int, batch_size: int) -> List[Tuple[int, int]]:
    """Slice bounds into the shuffled unlabeled pool for each labeled batch."""
    n_unl_batches = math.ceil(n_unl / batch_size) if n_unl else 0
    bounds = []
    for j in range(n_lab_batches):
        lo = (j * n_unl_batches) // n_lab_batches
        hi = ((j + 1) * n_unl_batches) // n_lab_batches
        bounds.append((lo * batch_size, min(hi * batch_size, n_unl)))
    return bounds


def fit(
    model: DdmmModel,
    labeled_set: PairDataset,
    unlabeled_set: Optional[PairDataset],
    config: TrainConfig,
    optim: Optional[OptimState] = None,
    on_epoch_end: Optional[Callable[[DdmmModel, OptimState, EpochRecord], None]] = None,
    progress: bool = False,
) -> TrainingLog:
    """Train for ``config.epochs`` epochs starting after ``model.epoch``."""
    if labeled_set.masks is None or len(labeled_set) == 0:
        raise ValidationError("fit needs a nonempty labeled set with masks")
    if labeled_set.size != model.size:
        raise ValidationError(f"data size {labeled_set.size} does not match model size {model.size}")
    log = TrainingLog()
    if config.epochs == 0:
        return log
    optim = optim or OptimState(model, config)
    images = torch.from_numpy(labeled_set.images)
    masks = torch.from_numpy(labeled_set.masks)
    pool = torch.from_numpy(unlabeled_set.images) if unlabeled_set is not None and len(unlabeled_set) else None
    probe = images[: max(1, config.vlb_probe)]
    n_lab = images.shape[0]
    n_unl = 0 if pool is None else pool.shape[0]
    n_batches = math.ceil(n_lab / config.batch_size)
    bounds = _schedule_unlabeled(n_batches, n_unl, config.batch_size)
    first = model.epoch + 1
    last = model.epoch + config.epochs
    for epoch in tqdm(range(first, last + 1), desc="train", disable=not progress):
        rng_sup = stream(config.seed_supervised, "supervised", epoch)
        rng_unsup = stream(config.seed_unsupervised, "unsupervised", epoch)
        order = torch.from_numpy(permutation(stream(config.seed_shuffle, "shuffle", epoch, 0), n_lab))
        order_u = torch.from_numpy(permutation(stream(config.seed_shuffle, "shuffle", epoch, 1), n_unl)) if n_unl else None
        sums = [0.0, 0.0, 0.0]
        unsup_batches = 0
        for step in range(n_batches):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            lo, hi = bounds[step]
            unl = pool[order_u[lo:hi]] if pool is not None and hi > lo else None
            try:
                report = train_batch(model, (images[idx], masks[idx]), unl, config, optim, rng_sup, rng_unsup)
            except NumericFailure as e:
                raise NumericFailure(f"non-finite loss at epoch {epoch}, step {step + 1}") from e
            sums[0] += report.loss_sup_img
            sums[1] += report.loss_sup_mask
            if report.loss_unsup is not None:
                sums[2] += report.loss_unsup
                unsup_batches += 1
        model.epoch = epoch
        vlb = None
        if epoch == first or epoch == last or (config.vlb_every and epoch % config.vlb_every == 0):
            vlb = evaluate_vlb(model, probe, config.vlb_seed)
        record = EpochRecord(
            epoch=epoch,
            loss_sup_img=sums[0] / n_batches,
            loss_sup_mask=sums[1] / n_batches,
            loss_unsup=sums[2] / unsup_batches if unsup_batches else None,
            vlb_img=vlb,
        )
        log.records.append(record)
        logger.info(
            "epoch %d: sup_img %.5f sup_mask %.5f unsup %s vlb %s",
            epoch, record.loss_sup_img, record.loss_sup_mask, _fmt(record.loss_unsup) or "-", _fmt(vlb) or "-",
        )
        if on_epoch_end is not None:
            on_epoch_end(model, optim, record)
    return log
