"""Image-quality and segmentation metrics.

FID and KID are computed on features from ``FeatureExtractor``, a fixed,
seeded, untrained convolutional network. Its values are only comparable with
other values computed here using the same extractor seed, never with
published Inception-based numbers.

Pairwise metrics (SSIM, UQI, SCC) take Grids in model space [-1, 1] by
default and remap them to [0, 1] first.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg
from torch import nn

from .errors import NumericFailure, ValidationError
from .rng import stream

ArrayLike = Union[np.ndarray, torch.Tensor]

SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
EIGEN_REJECT = -1e-8


def _np(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _planes(a: ArrayLike, b: ArrayLike, value_range: str) -> Tuple[np.ndarray, np.ndarray]:
    """Return (C, H, W) float64 copies of a and b, remapped to [0, 1] from model space."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValidationError(f"expected a (C, H, W) or (H, W) grid; got {a.shape}")
    if value_range == "model":
        a, b = (a + 1.0) / 2.0, (b + 1.0) / 2.0
    elif value_range != "unit":
        raise ValidationError(f"value_range must be 'model' or 'unit'; got {value_range!r}")
    return a, b


def _window_stats(a: np.ndarray, b: np.ndarray):
    w = min(SSIM_WINDOW, a.shape[-2], a.shape[-1])
    wa = sliding_window_view(a, (w, w), axis=(-2, -1))
    wb = sliding_window_view(b, (w, w), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    return mu_a, mu_b, var_a, var_b, cov


def ssim(a: ArrayLike, b: ArrayLike, value_range: str = "model") -> float:
    """Mean SSIM over every 7x7 window (population moments, unit dynamic range)."""
    a, b = _planes(a, b, value_range)
    mu_a, mu_b, var_a, var_b, cov = _window_stats(a, b)
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def uqi(a: ArrayLike, b: ArrayLike, value_range: str = "model") -> float:
    """SSIM without stabilizers; windows with a zero denominator are skipped (0.0 if none remain)."""
    a, b = _planes(a, b, value_range)
    mu_a, mu_b, var_a, var_b, cov = _window_stats(a, b)
    num = (2.0 * mu_a * mu_b) * (2.0 * cov)
    den = (mu_a * mu_a + mu_b * mu_b) * (var_a + var_b)
    ok = den > 0
    if not ok.any():
        return 0.0
    return float(np.mean(num[ok] / den[ok]))


def laplacian(plane: np.ndarray) -> np.ndarray:
    """Valid-region 3x3 Laplacian response of a (..., H, W) array."""
    win = sliding_window_view(plane, (3, 3), axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, LAPLACIAN)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation of two arrays; 0.0 if either is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    if den == 0.0:
        return 0.0
    return float(np.dot(dx, dy) / den)


def scc(a: ArrayLike, b: ArrayLike, value_range: str = "model") -> float:
    """Spatial correlation coefficient: Pearson correlation of Laplacian responses, averaged over channels."""
    a, b = _planes(a, b, value_range)
    if min(a.shape[-2:]) < 3:
        raise ValidationError("scc needs grids of at least 3x3")
    return float(np.mean([pearson(laplacian(pa), laplacian(pb)) for pa, pb in zip(a, b)]))


# ---------- segmentation ----------

def _binary(x: ArrayLike, what: str) -> np.ndarray:
    arr = _np(x)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValidationError(f"{what} must be binary {{0, 1}}")
    return arr.astype(bool)


def dice(a: ArrayLike, b: ArrayLike) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0."""
    a, b = _binary(a, "dice input"), _binary(b, "dice input")
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _pairs(n: int) -> int:
    return n * (n - 1) // 2


def rand_score(a: ArrayLike, b: ArrayLike, adjusted: bool = False) -> float:
    """Rand index of the two foreground/background pixel partitions (adjusted variant on request)."""
    a, b = _binary(a, "rand input").ravel(), _binary(b, "rand input").ravel()
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    n = a.size
    n11 = int((a & b).sum())
    n10 = int((a & ~b).sum())
    n01 = int((~a & b).sum())
    n00 = n - n11 - n10 - n01
    total = _pairs(n)
    if total == 0:
        return 1.0
    same_both = sum(_pairs(c) for c in (n11, n10, n01, n00))
    same_a = _pairs(n11 + n10) + _pairs(n01 + n00)
    same_b = _pairs(n11 + n01) + _pairs(n10 + n00)
    if not adjusted:
        return (total + 2 * same_both - same_a - same_b) / total
    expected = same_a * same_b / total
    maximum = 0.5 * (same_a + same_b)
    if maximum == expected:
        return 1.0
    return (same_both - expected) / (maximum - expected)


# ---------- distribution metrics ----------

class FeatureExtractor(nn.Module):
    """Frozen random conv net: three conv stages (16, 32, 64 channels), global average pooling."""

    def __init__(self, seed: int = 0, in_channels: int = 1) -> None:
        super().__init__()
        self.seed = seed
        widths = [in_channels, 16, 32, 64]
        self.convs = nn.ModuleList(nn.Conv2d(widths[i], widths[i + 1], 3, padding=1) for i in range(3))
        gen = stream(seed, "init", 99)
        with torch.no_grad():
            for conv in self.convs:
                bound = 1.0 / math.sqrt(conv.weight[0].numel())
                conv.weight.copy_(torch.from_numpy(gen.uniform(-bound, bound, size=tuple(conv.weight.shape))))
                conv.bias.copy_(torch.from_numpy(gen.uniform(-bound, bound, size=tuple(conv.bias.shape))))
        self.double()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.double()
        for k, conv in enumerate(self.convs):
            h = F.leaky_relu(conv(h), 0.2)
            if k < 2:
                h = F.avg_pool2d(h, 2)
        return h.mean(dim=(-2, -1))

    def features(self, images: ArrayLike, batch_size: int = 256) -> np.ndarray:
        """(N, 1, H, W) images in [-1, 1] -> (N, 64) float64 features."""
        x = torch.as_tensor(_np(images))
        out = []
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                out.append(self(x[start:start + batch_size]).numpy())
        return np.concatenate(out, axis=0)


def _check_features(f: np.ndarray, what: str) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValidationError(f"{what}: need at least 2 feature rows; got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise NumericFailure(f"{what}: features are not finite")
    return f


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(real_features: np.ndarray, fake_features: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to the two feature sets.

    tr((S_r S_f)^(1/2)) is taken from the eigenvalues of the symmetric
    product S_r^(1/2) S_f S_r^(1/2). Eigenvalues below -1e-8 are rejected;
    smaller negatives are clamped to 0.
    """
    r = _check_features(real_features, "real")
    f = _check_features(fake_features, "fake")
    if r.shape[1] != f.shape[1]:
        raise ValidationError(f"feature dims differ: {r.shape[1]} vs {f.shape[1]}")
    mu_r, mu_f = r.mean(axis=0), f.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(r, rowvar=False))
    cov_f = np.atleast_2d(np.cov(f, rowvar=False))
    root = _psd_sqrt(cov_r)
    prod = root @ cov_f @ root
    vals = linalg.eigvalsh(0.5 * (prod + prod.T))
    if vals.size and vals.min() < EIGEN_REJECT:
        raise NumericFailure(f"covariance product has a negative eigenvalue {vals.min():.3e}")
    tr_sqrt = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = mu_r - mu_f
    value = float(diff @ diff) + float(np.trace(cov_r) + np.trace(cov_f)) - 2.0 * tr_sqrt
    return max(value, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _mmd2(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD. Equal-size sets use the paired U-statistic, which is exactly 0 for x == y."""
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    m, n = x.shape[0], y.shape[0]
    off_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    off_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        off_xy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
        return float(off_xx + off_yy - 2.0 * off_xy)
    return float(off_xx + off_yy - 2.0 * kxy.mean())


def kid(real_features: np.ndarray, fake_features: np.ndarray, subset_size: int = 100, max_subsets: int = 10, seed: int = 0) -> float:
    """Kernel distance with the cubic polynomial kernel.

    With at least 200 samples on both sides the estimate is averaged over
    min(n // 100, 10) seeded subsets of 100; otherwise one full-set estimate.
    Subset indices depend only on (seed, subset number, set size), which keeps
    kid(A, B) == kid(B, A).
    """
    r = _check_features(real_features, "real")
    f = _check_features(fake_features, "fake")
    if r.shape[1] != f.shape[1]:
        raise ValidationError(f"feature dims differ: {r.shape[1]} vs {f.shape[1]}")
    n = min(r.shape[0], f.shape[0])
    if n < 2 * subset_size:
        return _mmd2(r, f)
    count = min(n // subset_size, max_subsets)
    values = []
    for k in range(count):
        ir = stream(seed, "kid", k, r.shape[0]).choice(r.shape[0], subset_size, replace=False)
        jf = stream(seed, "kid", k, f.shape[0]).choice(f.shape[0], subset_size, replace=False)
        values.append(_mmd2(r[ir], f[jf]))
    return float(np.mean(values))


# ---------- reports ----------

@dataclass(frozen=True)
class MetricsConfig:
    extractor_seed: int = 0
    pairing_seed: int = 0
    max_pairs: int = 1000
    kid_subset_size: int = 100
    adjusted_rand: bool = False

    def __post_init__(self) -> None:
        if self.max_pairs < 1 or self.kid_subset_size < 2:
            raise ValidationError("max_pairs must be >= 1 and kid_subset_size >= 2")


@dataclass
class QualityReport:
    fid: float
    kid: float
    ssim_mean: float
    uqi_mean: float
    scc_mean: float
    n_real: int
    n_fake: int
    extractor_seed: int

    def to_csv(self, path: Path) -> None:
        row = asdict(self)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(list(row))
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])


def quality_report(real: ArrayLike, fake: ArrayLike, cfg: Optional[MetricsConfig] = None) -> QualityReport:
    """FID/KID over all images, SSIM/UQI/SCC over a seeded random matching of up to ``cfg.max_pairs`` pairs."""
    cfg = cfg or MetricsConfig()
    real, fake = _np(real), _np(fake)
    extractor = FeatureExtractor(cfg.extractor_seed, in_channels=real.shape[1])
    fr, ff = extractor.features(real), extractor.features(fake)
    m = min(len(real), len(fake), cfg.max_pairs)
    gen = stream(cfg.pairing_seed, "pairing", 1)
    ir = gen.permutation(len(real))[:m]
    jf = gen.permutation(len(fake))[:m]
    pairs = list(zip(real[ir], fake[jf]))
    return QualityReport(
        fid=fid(fr, ff),
        kid=kid(fr, ff, subset_size=cfg.kid_subset_size, seed=cfg.extractor_seed),
        ssim_mean=float(np.mean([ssim(a, b) for a, b in pairs])),
        uqi_mean=float(np.mean([uqi(a, b) for a, b in pairs])),
        scc_mean=float(np.mean([scc(a, b) for a, b in pairs])),
        n_real=len(real),
        n_fake=len(fake),
        extractor_seed=cfg.extractor_seed,
    )
