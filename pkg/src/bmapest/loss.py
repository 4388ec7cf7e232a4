"""Pixel-wise L2 data terms in image or k-space domain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bmapest.errors import ValidationError

DOMAINS = ("image", "kspace")


@dataclass(frozen=True)
class LossSpec:
    domain: str = "image"
    weights: tuple[float, ...] | None = None  # per contrast, None = all ones

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValidationError(f"loss domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if any(not x >= 0 for x in w) or not any(x > 0 for x in w):
                raise ValidationError("loss weights must be >= 0 and not all zero")
            object.__setattr__(self, "weights", w)

    def weight_array(self, n: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(n)
        if len(self.weights) != n:
            raise ValidationError(f"{len(self.weights)} loss weights for {n} contrasts")
        return np.asarray(self.weights)


def check_congruent(sim, obs):
    if tuple(sim.labels) != tuple(obs.labels):
        raise ValidationError(f"contrast stacks differ: {sim.labels} vs {obs.labels}")
    if sim.kspace.shape != obs.kspace.shape or sim.images.shape != obs.images.shape:
        raise ValidationError(f"contrast stack shapes differ: {sim.kspace.shape} vs {obs.kspace.shape}")


def loss(stack_sim, stack_obs, spec: LossSpec = LossSpec()) -> float:
    """Weighted sum of squared residuals over contrasts and pixels.

    Image domain compares magnitude images; k-space domain compares the
    complex samples, so a phase flip that leaves the image untouched still
    costs in k-space.
    """
    check_congruent(stack_sim, stack_obs)
    w = spec.weight_array(len(stack_sim.labels))
    if spec.domain == "image":
        r2 = (stack_sim.images - stack_obs.images) ** 2
    else:
        r2 = np.abs(stack_sim.kspace - stack_obs.kspace) ** 2
    return float(np.sum(w * r2.sum(axis=(1, 2))))
