"""Random-walk Metropolis-Hastings over shape states.

The proposal perturbs every parameter with an independent zero-mean Gaussian;
mode coefficients and scale are clamped to their plausibility bounds, treated
as reflecting at the boundary with the proposal ratio kept at 1.  A chain
discards a burn-in prefix and then retains one state every `thin` steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .shapemodel import ShapeState
from .volume import BinaryMask


@dataclass(frozen=True)
class SamplerConfig:
    burn_in: int = 100
    thin: int = 25
    n_samples: int = 15
    std_scale: float = 0.02
    std_translation: float = 0.3
    std_rotation: float = 0.02
    std_mode: float = 0.1  # per-mode, in units of sqrt(eigenvalue)
    scale_bounds: tuple[float, float] = (0.6, 1.3)
    translation_bound_factor: float = 0.5  # |t_i| <= factor * dims_i; <=0 disables
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if min(self.burn_in, self.thin, self.n_samples) < 1:
            raise ValueError("burn_in, thin and n_samples must all be >= 1")
        if min(self.std_scale, self.std_translation, self.std_rotation, self.std_mode) <= 0:
            raise ValueError("proposal standard deviations must be positive")
        if not (0 < self.scale_bounds[0] <= self.scale_bounds[1]):
            raise ValueError(f"bad scale bounds {self.scale_bounds}")


@dataclass
class SampleSet:
    """Retained chain states plus the best state seen anywhere in the run."""

    states: list[ShapeState]
    scores: list[float]
    masks: list[BinaryMask] | None
    n_steps: int
    n_accepted: int
    best_state: ShapeState
    best_score: float

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_steps if self.n_steps else 0.0

    def best(self) -> tuple[ShapeState, float]:
        idx = int(np.argmax(self.scores))
        return self.states[idx], self.scores[idx]


def propose(
    state: ShapeState,
    cfg: SamplerConfig,
    sqrt_eigenvalues: Sequence[float],
    rng: np.random.Generator,
    bound_factor: float = 3.0,
    translation_bounds: Sequence[float] | None = None,
) -> ShapeState:
    """One Gaussian random-walk move from `state`."""
    n = len(state.coeffs)
    noise = rng.standard_normal(7 + n)
    lo, hi = cfg.scale_bounds
    scale = min(hi, max(lo, state.scale + cfg.std_scale * noise[0]))
    t = [state.translation[i] + cfg.std_translation * noise[1 + i] for i in range(3)]
    if translation_bounds is not None:
        t = [min(float(b), max(-float(b), v)) for v, b in zip(t, translation_bounds)]
    yaw, pitch, roll = (
        state.rotation[i] + cfg.std_rotation * noise[4 + i] for i in range(3)
    )
    coeffs = []
    for i in range(n):
        bound = bound_factor * float(sqrt_eigenvalues[i])
        b = state.coeffs[i] + cfg.std_mode * float(sqrt_eigenvalues[i]) * noise[7 + i]
        coeffs.append(min(bound, max(-bound, b)))
    return ShapeState(scale, tuple(t), (yaw, pitch, roll), tuple(coeffs))


def accept_prob(score_new: float, score_old: float) -> float:
    """Metropolis acceptance min(1, new/old) for a symmetric proposal."""
    if score_old <= 0:
        raise ValueError(f"current score must be positive, got {score_old}")
    if score_new >= score_old:
        return 1.0
    return score_new / score_old


def _check_score(value: float) -> float:
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"score function returned invalid value {value}")
    return value


def run_chain(
    init: ShapeState,
    score_fn: Callable[[ShapeState], float],
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    *,
    sqrt_eigenvalues: Sequence[float] = (),
    bound_factor: float = 3.0,
    translation_bounds: Sequence[float] | None = None,
    mask_fn: Callable[[ShapeState], BinaryMask] | None = None,
) -> SampleSet:
    """Run burn_in + n_samples*thin Metropolis steps and retain n_samples.

    The returned set is fully determined by (init, cfg, rng seed).  mask_fn,
    when given, materializes each retained state; retained scores are always
    positive because invalid scores raise instead of propagating.  best_state
    tracks the highest-scoring state over every evaluated step (including
    rejected proposals), which callers use as a hill-climbing anchor.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    current = init
    current_score = _check_score(score_fn(init))
    best_state, best_score = current, current_score

    states: list[ShapeState] = []
    scores: list[float] = []
    masks: list[BinaryMask] | None = [] if mask_fn is not None else None

    total = cfg.burn_in + cfg.n_samples * cfg.thin
    accepted = 0
    for step in range(1, total + 1):
        candidate = propose(current, cfg, sqrt_eigenvalues, rng, bound_factor, translation_bounds)
        cand_score = _check_score(score_fn(candidate))
        if cand_score > best_score:
            best_state, best_score = candidate, cand_score
        alpha = accept_prob(cand_score, current_score)
        if rng.random() < alpha:
            current = candidate
            current_score = cand_score
            accepted += 1
        if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thin == 0:
            states.append(current)
            scores.append(current_score)
            if masks is not None:
                masks.append(mask_fn(current))

    return SampleSet(
        states,
        scores,
        masks,
        n_steps=total,
        n_accepted=accepted,
        best_state=best_state,
        best_score=best_score,
    )
