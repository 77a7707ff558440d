"""Scoring of candidate shapes against the probability map and answered seeds.

A candidate's score combines a per-voxel Bernoulli log-likelihood under the
map with a penalty summing, over every seed the candidate contradicts, the
magnitude of the shape field there (how deep the contradiction is).  The
weight beta between the two is adapted after each answer: agreement with a
confident map lowers it, contradiction raises it, capped at beta_max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .shapemodel import ShapeModel, ShapeState, evaluate_at_many
from .volume import BinaryMask, ScalarField3D


@dataclass(frozen=True)
class Seed:
    """An answered question: voxel, the user's inside/outside label, and the
    map value frozen at answer time (so later map swaps cannot rewrite the
    beta history)."""

    location: tuple[int, int, int]
    label: int
    question_index: int
    map_value: float

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class BetaConfig:
    beta0: float = 1.0
    learning_rate: float = 3.0
    beta_max: float = 4.0

    def __post_init__(self) -> None:
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.beta_max < self.beta0:
            raise ValueError("beta_max must be >= beta0")


def log_likelihood(mask: BinaryMask, pmap: ScalarField3D) -> float:
    """Mean Bernoulli log-likelihood of a segmentation under the map.

    Always <= 0 and finite (the map is clamped away from 0 and 1); equals 0
    only when the mask matches a perfectly saturated map.
    """
    if mask.dims != pmap.dims:
        raise ValueError(f"dims differ: mask {mask.dims} vs map {pmap.dims}")
    s = mask.data.ravel().astype(bool)
    p = pmap.data.ravel()
    total = np.log(p[s]).sum() + np.log1p(-p[~s]).sum()
    return float(total / mask.n_voxels)


def seed_values(
    model: ShapeModel, state: ShapeState, seeds: list[Seed], out_dims
) -> np.ndarray:
    """Shape-field values at every seed location for one state."""
    if not seeds:
        return np.zeros(0)
    pts = np.array([s.location for s in seeds], dtype=np.float64)
    return evaluate_at_many(model, state, pts, out_dims)


def violated_seeds(
    model: ShapeModel, state: ShapeState, seeds: list[Seed], out_dims
) -> list[Seed]:
    """Seeds whose label disagrees with the state's prediction (inside iff
    the field is negative)."""
    values = seed_values(model, state, seeds, out_dims)
    return [s for s, v in zip(seeds, values) if int(v < 0.0) != s.label]


def penalty(model: ShapeModel, state: ShapeState, seeds: list[Seed], out_dims) -> float:
    """Sum of |field value| over violated seeds; 0 when all seeds are kept."""
    values = seed_values(model, state, seeds, out_dims)
    return penalty_from_values(values, seeds)


def penalty_from_values(values: np.ndarray, seeds: list[Seed]) -> float:
    total = 0.0
    for s, v in zip(seeds, values):
        if int(v < 0.0) != s.label:
            total += abs(v)
    return total


def posterior_score(log_lik: float, pen: float, beta: float) -> float:
    """Unnormalized posterior 1 / (1 - L + beta*g); in (0, 1]."""
    if log_lik > 0:
        raise ValueError(f"log-likelihood must be <= 0, got {log_lik}")
    if pen < 0 or beta < 0:
        raise ValueError("penalty and beta must be nonnegative")
    return 1.0 / (1.0 - log_lik + beta * pen)


def agreement_epsilon(map_value: float, label: int) -> int:
    """Agreement of an answer with the thresholded map.

    +1 when both call the voxel inside, -1 when they disagree, 0 when both
    call it outside (an uninformative true negative).  Map values of exactly
    0.5 threshold to "inside".
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    predicted = 1 if map_value >= 0.5 else 0
    if predicted == label == 1:
        return 1
    if predicted != label:
        return -1
    return 0


def update_beta(beta: float, epsilon: int, map_value: float, cfg: BetaConfig) -> float:
    """Multiplicative beta update, weighted by the map's confidence.

    The distance |1/2 - map_value| scales the step, so answers at voxels
    where the map is undecided leave beta untouched.  Capped at beta_max,
    never nonpositive.
    """
    if epsilon not in (-1, 0, 1):
        raise ValueError(f"epsilon must be in {{-1, 0, 1}}, got {epsilon}")
    loss = abs(0.5 - map_value)
    return min(cfg.beta_max, beta * math.exp(-epsilon * cfg.learning_rate * loss))
