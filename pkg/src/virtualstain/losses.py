"""Training objectives for the stain-transformation, conditional and cycle GANs.

Every loss accepts engine tensors (so gradients flow) or plain arrays and
returns a 0-d :class:`~virtualstain.engine.Tensor`, or a breakdown holding one.
Discriminator outputs are probabilities, one per batch item; batch terms are
averaged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor
from .nets import validate_condition


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """``alpha``: TV weight, ``beta``: adversarial weight, ``lambda_cyc``/``phi``: cycle GAN weights."""

    alpha: float = 0.0
    beta: float = 0.0
    lambda_cyc: float = 10.0
    phi: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_cyc", "phi"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be a finite value >= 0, got {v}")


@dataclass
class LossBreakdown:
    l1_term: float
    tv_term: float
    adv_term: float
    total: float
    graph: Tensor | None = None

    @property
    def fractions(self) -> tuple[float, float, float]:
        if self.total == 0:
            return (0.0, 0.0, 0.0)
        return (self.l1_term / self.total, self.tv_term / self.total, self.adv_term / self.total)


def _check_same(z: Tensor, g: Tensor) -> None:
    if z.shape != g.shape:
        raise ShapeError(f"operand shapes differ: {z.shape} vs {g.shape}")


def l1_loss(z, g) -> Tensor:
    """Mean absolute difference: per-channel pixel mean, averaged over channels and batch."""
    z, g = E.as_tensor(z), E.as_tensor(g)
    _check_same(z, g)
    return E.mean(E.absolute(E.sub(z, g)))


def tv_loss(g) -> Tensor:
    """Anisotropic total variation summed over pixels and channels, averaged over the batch.

    Only neighbour pairs inside the image contribute.
    """
    g = E.as_tensor(g)
    if g.data.ndim != 4 or g.shape[2] < 2 or g.shape[3] < 2:
        raise ShapeError(f"tv_loss needs a (n, c, h>=2, w>=2) tensor, got {g.shape}")
    n, _, h, w = g.shape
    down = E.sub(E.slice_spatial(g, slice(1, h), slice(None)), E.slice_spatial(g, slice(0, h - 1), slice(None)))
    right = E.sub(E.slice_spatial(g, slice(None), slice(1, w)), E.slice_spatial(g, slice(None), slice(0, w - 1)))
    return E.mul(E.add(E.total(E.absolute(down)), E.total(E.absolute(right))), 1.0 / n)


def _prob(d) -> Tensor:
    d = E.as_tensor(d)
    if np.any(d.data < 0) or np.any(d.data > 1):
        raise ValueError("discriminator outputs must be probabilities in [0, 1]")
    return d


def adversarial_term(d_of_g) -> Tensor:
    """``(1 - D(G(x)))**2`` averaged over the batch."""
    return E.mean(E.square(E.sub(1.0, _prob(d_of_g))))


def generator_loss(z, g, d_of_g, w: LossWeights) -> LossBreakdown:
    """``L1(z, g) + alpha * TV(g) + beta * (1 - D(g))**2``."""
    if w.alpha < 0 or w.beta < 0:
        raise ValueError("loss weights must be non-negative")
    l1 = l1_loss(z, g)
    tv = E.mul(tv_loss(g), w.alpha)
    adv = E.mul(adversarial_term(d_of_g), w.beta)
    tot = E.add(E.add(l1, tv), adv)
    return LossBreakdown(l1.item(), tv.item(), adv.item(), tot.item(), tot)


def discriminator_loss(d_of_g, d_of_z) -> Tensor:
    """``D(G(x))**2 + (1 - D(z))**2``, each averaged over the batch."""
    fake = E.mean(E.square(_prob(d_of_g)))
    real = E.mean(E.square(E.sub(1.0, _prob(d_of_z))))
    return E.add(fake, real)


def conditional_losses(z, g_cond, d_outputs, cond, w: LossWeights) -> tuple[LossBreakdown, Tensor]:
    """Generator and discriminator losses of the class-conditional GAN.

    ``d_outputs`` is ``(D(G(x, c), c), D(z, c))``. The condition matrix only
    enters through the networks that produced these operands; it is validated
    here against the image operands.
    """
    z, g_cond = E.as_tensor(z), E.as_tensor(g_cond)
    _check_same(z, g_cond)
    c = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    if c.ndim != 4:
        raise ValueError(f"condition matrix must be 4-D, got shape {c.shape}")
    n, _, h, w_ = z.shape
    validate_condition(c, c.shape[1], n, h, w_)
    d_fake, d_real = d_outputs
    return generator_loss(z, g_cond, d_fake, w), discriminator_loss(d_fake, d_real)


@dataclass
class CycleLoss:
    cycle_term: float
    adv_term: float
    total: float
    graph: Tensor | None = None


def cycle_generator_loss(x, y, G, F, D_X, D_Y, w: LossWeights = LossWeights()) -> CycleLoss:
    """``lambda * [L1(y, G(F(y))) + L1(x, F(G(x)))] + phi * [(1 - D_Y(G(x)))**2 + (1 - D_X(F(y)))**2]``.

    ``G``, ``F``, ``D_X``, ``D_Y`` are networks or callables with the same signature.
    """
    x, y = E.as_tensor(x), E.as_tensor(y)
    gx = G(x)
    fy = F(y)
    cycle = E.add(l1_loss(y, G(fy)), l1_loss(x, F(gx)))
    adv = E.add(adversarial_term(D_Y(gx)), adversarial_term(D_X(fy)))
    tot = E.add(E.mul(cycle, w.lambda_cyc), E.mul(adv, w.phi))
    return CycleLoss(w.lambda_cyc * cycle.item(), w.phi * adv.item(), tot.item(), tot)


def cycle_discriminator_losses(dx_real, dx_fake, dy_real, dy_fake) -> tuple[Tensor, Tensor]:
    """``(l_DX, l_DY)`` where ``l_DX = (1 - D_X(x))**2 + D_X(F(y))**2`` and likewise for ``D_Y``."""
    l_dx = E.add(E.mean(E.square(E.sub(1.0, _prob(dx_real)))), E.mean(E.square(_prob(dx_fake))))
    l_dy = E.add(E.mean(E.square(E.sub(1.0, _prob(dy_real)))), E.mean(E.square(_prob(dy_fake))))
    return l_dx, l_dy


@dataclass(frozen=True)
class RawTerms:
    """Unweighted loss magnitudes measured on one sample batch."""

    l1: float
    tv: float
    adv: float


def calibrate_weights(
    sample_batches: Iterable[RawTerms | Sequence[float]],
    target_fractions: tuple[float, float, float] = (0.01, 0.0003, 0.99),
    base: LossWeights = LossWeights(),
) -> LossWeights:
    """Choose ``alpha`` and ``beta`` so the mean raw terms hit the target loss fractions.

    With mean raw magnitudes ``L1, TV, ADV`` and targets ``(f1, f_tv, f_adv)``:
    ``alpha = (f_tv / f1) * L1 / TV`` and ``beta = (f_adv / f1) * L1 / ADV``.
    The balance drifts during training; this fixes the constants at the start.
    """
    samples = [s if isinstance(s, RawTerms) else RawTerms(*map(float, s)) for s in sample_batches]
    if not samples:
        raise CalibrationError("need at least one sample batch")
    f1, ftv, fadv = target_fractions
    if min(target_fractions) <= 0:
        raise CalibrationError("target fractions must be positive")
    l1 = float(np.mean([s.l1 for s in samples]))
    tv = float(np.mean([s.tv for s in samples]))
    adv = float(np.mean([s.adv for s in samples]))
    for name, v in (("L1", l1), ("TV", tv), ("adversarial", adv)):
        if not v > 0:
            raise CalibrationError(f"raw {name} term is zero on the sample batches; cannot balance it")
    return LossWeights(
        alpha=(ftv / f1) * l1 / tv,
        beta=(fadv / f1) * l1 / adv,
        lambda_cyc=base.lambda_cyc,
        phi=base.phi,
    )
