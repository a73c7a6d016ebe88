"""Segmentation losses, boundary perturbation, and the Dice metric.

The training objective combines a pixel-wise binary cross-entropy with
a soft Dice term.  The perturbed variant injects Gaussian noise into
logits wherever prediction and target disagree strongly, and mixes the
clean and perturbed losses; with a mixing weight of zero it reduces to
the plain loss exactly, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfig, NonBinaryInput, NonBinaryTarget, ShapeMismatch
from .rng import Rng

DICE_SMOOTHING = 1.0


@dataclass
class PblConfig:
    """Perturbed boundary loss settings."""

    tau: float = 0.75          # disagreement threshold on |target - sigmoid(logit)|
    lam: float = 0.1           # weight of the perturbed term
    noise_variance: float = 0.1

    def validate(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise InvalidConfig(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfig(f"lam must lie in [0, 1], got {self.lam}")
        if self.noise_variance < 0.0:
            raise InvalidConfig(f"noise_variance must be >= 0, got {self.noise_variance}")


@dataclass
class LossBreakdown:
    seg_loss: float
    perturbed_loss: float
    composite: float
    bce: float
    dice_term: float


def _check_binary(arr: np.ndarray, error, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise error(f"{what} must contain only 0 and 1")
    return arr


def _segmentation_parts(logits: Tensor, y: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """(total, bce, dice_loss) as tensors; y already validated."""
    y_t = Tensor(y)
    bce = ad.mean_reduce(ad.sub(ad.softplus(logits), ad.mul(logits, y_t)))
    probs = ad.sigmoid(logits)
    intersection = ad.sum_reduce(ad.mul(probs, y_t))
    numerator = ad.add(ad.scale(intersection, 2.0), Tensor(DICE_SMOOTHING))
    denominator = ad.add(ad.sum_reduce(probs), Tensor(float(y.sum()) + DICE_SMOOTHING))
    dice_loss = ad.sub(Tensor(1.0), ad.div(numerator, denominator))
    return ad.add(ad.scale(bce, 0.5), dice_loss), bce, dice_loss


def segmentation_loss(logits: Tensor, target_mask: np.ndarray) -> Tensor:
    """0.5 * BCE + soft Dice loss, differentiable wrt the logits.

    BCE uses the softplus identity softplus(z) - z*y, so it is stable
    for logits of any magnitude.
    """
    y = _check_binary(target_mask, NonBinaryTarget, "targets")
    if logits.shape != y.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {y.shape}")
    total, _, _ = _segmentation_parts(logits, y)
    return total


def inconsistency_mask(target: np.ndarray, logits: np.ndarray, tau: float) -> np.ndarray:
    """Boolean mask of pixels where |target - sigmoid(logit)| > tau.

    Operates on detached values; the threshold comparison is strict, so
    tau >= 1 always yields an empty mask.
    """
    y = _check_binary(target, NonBinaryTarget, "targets")
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeMismatch(f"logits {z.shape} vs targets {y.shape}")
    probs = 1.0 / (1.0 + np.exp(-np.abs(z)))
    probs = np.where(z >= 0, probs, 1.0 - probs)
    return np.ascontiguousarray(np.abs(y - probs) > tau)


def perturb_logits(logits: Tensor, delta: np.ndarray, rng: Rng,
                   variance: float) -> Tensor:
    """Add Gaussian noise at delta=1 positions, in row-major order.

    Exactly one Gaussian draw (two generator words) is consumed per
    masked pixel, so the stream position depends only on the mask
    population, not on pixels outside it.
    """
    if delta.shape != logits.shape:
        raise ShapeMismatch(f"mask {delta.shape} vs logits {logits.shape}")
    flat_idx = np.flatnonzero(np.ascontiguousarray(delta))
    if flat_idx.size == 0:
        return logits
    noise = np.zeros(logits.size, dtype=np.float64)
    noise[flat_idx] = rng.gaussian_array(flat_idx.size, 0.0, variance)
    return ad.add(logits, Tensor(noise.reshape(logits.shape)))


def composite_pbl_loss(logits: Tensor, target: np.ndarray, cfg: PblConfig,
                       rng: Rng) -> tuple[Tensor, LossBreakdown]:
    """(1 - lam) * clean loss + lam * loss on noise-perturbed logits.

    Returns the differentiable composite plus a float breakdown of its
    terms.  Gradient flows through both branches.
    """
    cfg.validate()
    y = _check_binary(target, NonBinaryTarget, "targets")
    if logits.shape != y.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {y.shape}")
    seg, bce, dice_loss = _segmentation_parts(logits, y)
    delta = inconsistency_mask(y, logits.values, cfg.tau)
    noisy = perturb_logits(logits, delta, rng, cfg.noise_variance)
    perturbed = segmentation_loss(noisy, y)
    composite = ad.add(ad.scale(seg, 1.0 - cfg.lam), ad.scale(perturbed, cfg.lam))
    breakdown = LossBreakdown(
        seg_loss=seg.item(),
        perturbed_loss=perturbed.item(),
        composite=composite.item(),
        bce=bce.item(),
        dice_term=dice_loss.item(),
    )
    return composite, breakdown


def binarize_logits(logits: np.ndarray) -> np.ndarray:
    """Threshold at probability 0.5 (logit 0) into a uint8 mask."""
    return (np.asarray(logits) > 0.0).astype(np.uint8)


def dice_score(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """Overlap Dice coefficient of two binary masks; empty vs empty is 1."""
    p = _check_binary(pred_mask, NonBinaryInput, "predicted mask")
    t = _check_binary(target_mask, NonBinaryTarget, "target mask")
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {t.shape}")
    denom = p.sum() + t.sum()
    if denom == 0.0:
        return 1.0
    return float(2.0 * (p * t).sum() / denom)
