"""Feature fusion strategies: direct concatenation, deterministic soft
masking, and stochastic hard masking via Gumbel-Softmax resampling.

All variants map a pair of length-d feature vectors to a fused vector of
length 2d and expose the realized per-feature mask on every forward pass.
Soft masks weight each feature with a sigmoid in (0, 1); hard masks keep or
block each feature with a binary draw from a learned two-class categorical,
sampled exactly with the Gumbel-max trick and trained through the
temperature-controlled softmax relaxation (straight-through estimator).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, ParameterStore

__all__ = [
    "NonPositiveTemperature",
    "EpochOutOfRange",
    "PROB_FLOOR",
    "UNIFORM_FLOOR",
    "KEEP_CLASS",
    "TemperatureSchedule",
    "anneal",
    "FusionMask",
    "ClassLogits",
    "gumbel_sample",
    "gumbel_noise",
    "gumbel_softmax",
    "DirectFusion",
    "SoftFusion",
    "HardFusion",
    "fuse_direct",
]

# Class weights are floored before the log so a ReLU output of exactly zero
# cannot produce log(0); uniform draws are clamped away from {0, 1} for the
# same reason inside the double log.
PROB_FLOOR = 1e-8
UNIFORM_FLOOR = 1e-12

# Class index 0 means "keep the feature", index 1 means "block it".
# Exact ties in the argmax binarization resolve to the keep class; ties have
# probability zero under continuous noise but do occur with frozen noise.
KEEP_CLASS = 0


class NonPositiveTemperature(ValueError):
    """Gumbel-Softmax temperature must be strictly positive."""


class EpochOutOfRange(ValueError):
    """anneal() called with an epoch outside [0, total_epochs]."""


@dataclass(frozen=True)
class TemperatureSchedule:
    """Linear decay of the resampling temperature over training epochs."""

    tau_start: float = 1.0
    tau_end: float = 0.5
    total_epochs: int = 50

    def __post_init__(self):
        if not (self.tau_start >= self.tau_end > 0.0):
            raise NonPositiveTemperature(
                f"need tau_start >= tau_end > 0, got {self.tau_start}, {self.tau_end}"
            )
        if self.total_epochs < 1:
            raise EpochOutOfRange(f"total_epochs must be >= 1, got {self.total_epochs}")


def anneal(epoch: int, schedule: TemperatureSchedule) -> float:
    """Temperature for `epoch`: tau_start at 0, linearly down to tau_end."""
    if epoch < 0 or epoch > schedule.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    frac = epoch / schedule.total_epochs
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac


@dataclass(frozen=True)
class FusionMask:
    """Realized per-feature mask values for one forward pass (for logging)."""

    s1: np.ndarray
    s2: np.ndarray
    kind: str  # "soft" | "hard"

    def selection_rates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Mean kept fraction per sample for each modality."""
        return self.s1.mean(axis=-1), self.s2.mean(axis=-1)


@dataclass(frozen=True)
class ClassLogits:
    """Nonnegative two-class weights per feature, one block per modality mask."""

    alpha1: np.ndarray  # (..., d, 2)
    alpha2: np.ndarray  # (..., d, 2)


def gumbel_sample(u: np.ndarray) -> np.ndarray:
    """Transform uniform draws into Gumbel noise: -log(-log(u))."""
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_FLOOR, 1.0 - UNIFORM_FLOOR)
    return -np.log(-np.log(u))


def gumbel_noise(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return gumbel_sample(rng.uniform(size=shape))


def gumbel_softmax(log_pi: Tensor, noise: np.ndarray, tau: float) -> Tensor:
    """Relaxed class probabilities softmax((log_pi + noise) / tau) over the last axis."""
    if tau <= 0.0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    perturbed = ad.add(log_pi, ad.tensor(noise))
    return ad.softmax(ad.mul(perturbed, 1.0 / tau), axis=-1)


def _check_pair(a1: Tensor, a2: Tensor, d: int) -> None:
    if a1.shape != a2.shape or a1.shape[-1] != d:
        raise ad.ShapeMismatch("fuse", a1.shape, a2.shape, (d,))


def fuse_direct(a1: Tensor, a2: Tensor) -> Tuple[Tensor, FusionMask]:
    """Plain concatenation [a1; a2]; mask reported as all-ones."""
    if a1.shape != a2.shape:
        raise ad.ShapeMismatch("fuse_direct", a1.shape, a2.shape)
    z = ad.concat(a1, a2, axis=-1)
    ones = np.ones(a1.shape)
    return z, FusionMask(ones, ones, "hard")


class DirectFusion:
    """Unweighted fusion baseline; no parameters."""

    kind = "direct"

    def __init__(self, d: int):
        self.d = d
        self.out_dim = 2 * d

    def init_into(self, store: ParameterStore, rng) -> None:
        pass

    def fuse(self, params, a1: Tensor, a2: Tensor, **_) -> Tuple[Tensor, FusionMask]:
        _check_pair(a1, a2, self.d)
        return fuse_direct(a1, a2)


class SoftFusion:
    """Deterministic masking: each modality reweighted by its own sigmoid head.

    Both heads are conditioned on the concatenated pair, so either stream
    can veto the other's features.
    """

    kind = "soft"

    # Mask heads start near pass-through (sigmoid(2) ~ 0.88) so the model
    # begins as a mild reweighting of direct fusion and learns to attenuate
    # only where it pays off.
    BIAS_INIT = 2.0

    def __init__(self, prefix: str, d: int):
        self.d = d
        self.out_dim = 2 * d
        self.head1 = Linear(f"{prefix}.mask1", 2 * d, d)
        self.head2 = Linear(f"{prefix}.mask2", 2 * d, d)

    def init_into(self, store: ParameterStore, rng) -> None:
        self.head1.init_into(store, rng, bias_init=np.float64(self.BIAS_INIT))
        self.head2.init_into(store, rng, bias_init=np.float64(self.BIAS_INIT))

    def fuse(self, params, a1: Tensor, a2: Tensor, **_) -> Tuple[Tensor, FusionMask]:
        _check_pair(a1, a2, self.d)
        pair = ad.concat(a1, a2, axis=-1)
        s1 = ad.sigmoid(self.head1.apply(params, pair))
        s2 = ad.sigmoid(self.head2.apply(params, pair))
        z = ad.concat(ad.mul(a1, s1), ad.mul(a2, s2), axis=-1)
        return z, FusionMask(s1.values.copy(), s2.values.copy(), "soft")


class HardFusion:
    """Stochastic binary masking trained through Gumbel-Softmax resampling.

    A fully-connected layer followed by ReLU produces nonnegative two-class
    weights per feature; both modality masks share this layer by default
    (``shared_logits=False`` gives each mask its own layer). Sampling adds
    Gumbel noise to the log-weights and takes the argmax (exact categorical
    sampling); the backward pass follows the relaxed softmax h instead of
    the non-differentiable one-hot (straight-through estimator).
    """

    kind = "hard"

    # Both class biases start inside the ReLU-alive region, with the keep
    # class ahead: initial masks pass most features through, and neither
    # class is pinned at the probability floor where the saturated softmax
    # would stop gradients entirely.
    KEEP_BIAS_INIT = 1.0
    BLOCK_BIAS_INIT = 0.5

    def __init__(self, prefix: str, d: int, shared_logits: bool = True):
        self.d = d
        self.out_dim = 2 * d
        self.shared_logits = shared_logits
        if shared_logits:
            self.logit_layers = [Linear(f"{prefix}.alpha", 2 * d, 4 * d)]
        else:
            self.logit_layers = [
                Linear(f"{prefix}.alpha1", 2 * d, 2 * d),
                Linear(f"{prefix}.alpha2", 2 * d, 2 * d),
            ]

    def init_into(self, store: ParameterStore, rng) -> None:
        for layer in self.logit_layers:
            bias = np.tile([self.KEEP_BIAS_INIT, self.BLOCK_BIAS_INIT], layer.n_out // 2)
            layer.init_into(store, rng, bias_init=bias)

    def class_logits(self, params, a1: Tensor, a2: Tensor) -> Tensor:
        """Floored nonnegative class weights, shape (..., 2d, 2).

        Feature rows [0, d) belong to the modality-one mask, rows [d, 2d)
        to the modality-two mask.
        """
        _check_pair(a1, a2, self.d)
        pair = ad.concat(a1, a2, axis=-1)
        if self.shared_logits:
            raw = self.logit_layers[0].apply(params, pair)
        else:
            raw = ad.concat(
                self.logit_layers[0].apply(params, pair),
                self.logit_layers[1].apply(params, pair),
                axis=-1,
            )
        alpha = ad.add(ad.relu(raw), PROB_FLOOR)
        rows = (*alpha.shape[:-1], 2 * self.d, 2)
        return ad.reshape(alpha, rows)

    def class_logit_values(self, params, a1: Tensor, a2: Tensor) -> ClassLogits:
        alpha = self.class_logits(params, a1, a2).values
        return ClassLogits(alpha[..., : self.d, :].copy(), alpha[..., self.d :, :].copy())

    def fuse(
        self,
        params,
        a1: Tensor,
        a2: Tensor,
        *,
        tau: float,
        rng: Optional[np.random.Generator] = None,
        noise: Optional[np.ndarray] = None,
        straight_through: bool = True,
        **_,
    ) -> Tuple[Tensor, FusionMask]:
        """Sample binary masks and fuse.

        Exactly one of `rng` / `noise` supplies the Gumbel perturbation;
        passing `noise` freezes the draw (used by gradient checks).
        ``straight_through=False`` keeps the relaxed mask h in the forward
        pass as well, making the whole map differentiable end to end.
        """
        if tau <= 0.0:
            raise NonPositiveTemperature(f"temperature must be > 0, got {tau}")
        alpha = self.class_logits(params, a1, a2)
        if noise is None:
            if rng is None:
                raise ValueError("hard fusion needs a random generator or frozen noise")
            noise = gumbel_noise(rng, alpha.shape)
        elif noise.shape != alpha.shape:
            raise ad.ShapeMismatch("fuse_hard.noise", noise.shape, alpha.shape)
        h = gumbel_softmax(ad.log(alpha), noise, tau)
        h_keep = ad.reshape(
            ad.slice_(h, KEEP_CLASS, KEEP_CLASS + 1, axis=-1), h.shape[:-1]
        )
        if straight_through:
            perturbed = np.log(alpha.values) + noise
            binary = (
                perturbed[..., KEEP_CLASS] >= perturbed[..., 1 - KEEP_CLASS]
            ).astype(np.float64)
            mask_flat = ad.add(h_keep, ad.tensor(binary - h_keep.values))
        else:
            mask_flat = h_keep
        d = self.d
        s1 = ad.slice_(mask_flat, 0, d, axis=-1)
        s2 = ad.slice_(mask_flat, d, 2 * d, axis=-1)
        z = ad.concat(ad.mul(a1, s1), ad.mul(a2, s2), axis=-1)
        return z, FusionMask(s1.values.copy(), s2.values.copy(), "hard")
