"""Adversarial, cycle, disparity losses and their weighted combination.

All functions are pure; they accept torch tensors and return tensors so
they can be differentiated. ``combined_objective`` also accepts plain floats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch

LOG_EPS = 1e-7


class DivergenceError(FloatingPointError):
    """A loss component became non-finite; ``component`` names it."""

    def __init__(self, component: str, value, context: str = ""):
        self.component = component
        self.value = value
        msg = f"non-finite loss component {component!r} = {value}"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite non-negative number, got {v!r}")


DEFAULT_WEIGHTS = LossWeights(lambda1=10.0, lambda2=5.0)


@dataclass(frozen=True)
class LossBreakdown:
    adv_x: float
    adv_y: float
    cycle: float
    disparity: float
    total: float
    lambda1: float
    lambda2: float

    def recompute_total(self):
        return compose_total(self.adv_x, self.adv_y, self.cycle, self.disparity,
                             LossWeights(self.lambda1, self.lambda2))


class AdversarialLoss(NamedTuple):
    discriminator: torch.Tensor
    generator: torch.Tensor
    n_clamped: int


def _clamp(p: torch.Tensor) -> tuple[torch.Tensor, int]:
    outside = (p < LOG_EPS) | (p > 1 - LOG_EPS)
    return p.clamp(LOG_EPS, 1 - LOG_EPS), int(outside.sum())


def discriminator_loss(real: torch.Tensor, fake: torch.Tensor, mode: str = "log") -> torch.Tensor:
    """-mean(log D(real)) - mean(log(1 - D(fake))), or the least-squares analogue."""
    if mode == "lsgan":
        return ((real - 1) ** 2).mean() + (fake**2).mean()
    r, _ = _clamp(real)
    f, _ = _clamp(fake)
    return -torch.log(r).mean() - torch.log1p(-f).mean()


def generator_adversarial_loss(fake: torch.Tensor, mode: str = "log") -> torch.Tensor:
    """Non-saturating generator loss -mean(log D(fake))."""
    if mode == "lsgan":
        return ((fake - 1) ** 2).mean()
    f, _ = _clamp(fake)
    return -torch.log(f).mean()


def adversarial_loss(disc_output_real: torch.Tensor, disc_output_fake: torch.Tensor,
                     mode: str = "log") -> AdversarialLoss:
    if mode not in ("log", "lsgan"):
        raise ValueError(f"unknown adversarial mode {mode!r}")
    n_clamped = 0
    if mode == "log":
        n_clamped = _clamp(disc_output_real)[1] + _clamp(disc_output_fake)[1]
    return AdversarialLoss(
        discriminator_loss(disc_output_real, disc_output_fake, mode),
        generator_adversarial_loss(disc_output_fake, mode),
        n_clamped,
    )


def _check_shapes(*pairs):
    for name, a, b in pairs:
        if a.shape != b.shape:
            raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def cycle_loss(x_real, x_reconstructed, y_real, y_reconstructed) -> torch.Tensor:
    """mean|x - x_rec| + mean|y - y_rec|."""
    _check_shapes(("x", x_real, x_reconstructed), ("y", y_real, y_reconstructed))
    return (x_real - x_reconstructed).abs().mean() + (y_real - y_reconstructed).abs().mean()


def disparity_loss(x_real, y_translated, y_real, x_translated) -> torch.Tensor:
    """mean|x - G_xy(x)| + mean|y - G_yx(y)|: single-hop translation vs its own source."""
    _check_shapes(("x", x_real, y_translated), ("y", y_real, x_translated))
    return (x_real - y_translated).abs().mean() + (y_real - x_translated).abs().mean()


def compose_total(adv_x, adv_y, cycle, disparity, weights: LossWeights):
    return adv_x + adv_y + weights.lambda1 * cycle + weights.lambda2 * disparity


def _as_float(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def combined_objective(adv_x, adv_y, cycle, disparity, weights: LossWeights):
    """Weighted total of the generator-side terms.

    Returns ``(total, breakdown)``: ``total`` keeps the input type (a tensor
    stays differentiable), ``breakdown`` holds floats whose ``total`` is
    composed in float64 from the float fields, so it recomputes exactly.
    """
    parts = {"adv_x": adv_x, "adv_y": adv_y, "cycle": cycle, "disparity": disparity}
    floats = {k: _as_float(v) for k, v in parts.items()}
    for k, v in floats.items():
        if not math.isfinite(v):
            raise DivergenceError(k, v)
    total = compose_total(adv_x, adv_y, cycle, disparity, weights)
    breakdown = LossBreakdown(
        total=compose_total(floats["adv_x"], floats["adv_y"], floats["cycle"],
                            floats["disparity"], weights),
        lambda1=weights.lambda1,
        lambda2=weights.lambda2,
        **floats,
    )
    return total, breakdown
