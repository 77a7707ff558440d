"""The interactive loop: sample candidates, ask, ingest answers, finalize.

Each question runs a Metropolis-Hastings pass under the current posterior,
splits the volume into agreement regions by superposing the candidate masks,
and asks about the centroid of the most uncertain region.  Answers become
seeds, update the map-vs-seed weighting, and reshape the posterior for the
next pass.  A simulated oracle (the ground-truth mask) drives hands-free
evaluation runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy import ndimage

from . import _kernels
from .posterior import (
    BetaConfig,
    Seed,
    agreement_epsilon,
    log_likelihood,
    penalty_from_values,
    posterior_score,
    update_beta,
    violated_seeds,
)
from .sampler import SampleSet, SamplerConfig, run_chain
from .shapemodel import (
    ShapeModel,
    ShapeState,
    identity_state,
    lattice_diagonal,
    rotation_matrix,
    state_transform,
)
from .volume import BinaryMask, ScalarField3D, dice


class BudgetExhausted(RuntimeError):
    """All question slots of the session have been used."""


class SessionConverged(RuntimeError):
    """Every candidate agrees (or nothing is left to ask about)."""


class NoPendingQuestion(RuntimeError):
    """answer() was called without an open question."""


@dataclass
class UncertaintyRegion:
    """Connected component of one intermediate candidate-count level."""

    level: int
    voxels: np.ndarray  # (k, 3) int64
    centroid: np.ndarray  # (3,) float64
    score: float
    min_flat: int

    @property
    def size(self) -> int:
        return self.voxels.shape[0]


@dataclass
class UncertaintyPartition:
    """Candidate-count field plus its disagreement regions.

    counts[v] is how many of the n candidate masks contain v; regions are the
    6-connected components of each level 1..n-1, scored by how close the
    level is to half the candidates.
    """

    counts: np.ndarray
    n_candidates: int
    regions: list[UncertaintyRegion]

    @property
    def disagreement_size(self) -> int:
        return int(np.count_nonzero((self.counts > 0) & (self.counts < self.n_candidates)))


def build_partition(samples: SampleSet | list[BinaryMask]) -> UncertaintyPartition:
    masks = samples.masks if isinstance(samples, SampleSet) else samples
    if not masks:
        raise ValueError("need at least one candidate mask")
    n = len(masks)
    dims = masks[0].dims
    counts = np.zeros(dims, dtype=np.int16)
    for m in masks:
        counts += m.data

    regions: list[UncertaintyRegion] = []
    mid = np.argwhere((counts > 0) & (counts < n))
    if mid.size:
        lo = mid.min(axis=0)
        hi = mid.max(axis=0) + 1
        window = counts[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        for level in range(1, n):
            level_mask = window == level
            if not level_mask.any():
                continue
            labeled, n_comp = ndimage.label(level_mask)
            score = 0.5 - abs(level / n - 0.5)
            for comp, sl in enumerate(ndimage.find_objects(labeled), start=1):
                local = np.argwhere(labeled[sl] == comp)
                voxels = local + [s.start for s in sl] + lo
                flat = np.ravel_multi_index(voxels.T, dims)
                regions.append(
                    UncertaintyRegion(
                        level=level,
                        voxels=voxels,
                        centroid=voxels.mean(axis=0),
                        score=score,
                        min_flat=int(flat.min()),
                    )
                )
    return UncertaintyPartition(counts, n, regions)


def select_question(
    partition: UncertaintyPartition, asked: set[tuple[int, int, int]]
) -> tuple[int, int, int] | None:
    """Question voxel of the most uncertain region with an unasked voxel.

    Regions are ranked by (score, voxel count, lowest linear index); the
    rounded centroid is used when it lies in the region and is still open,
    otherwise the open region voxel nearest the centroid.  Returns None when
    nothing is left to ask (the convergence signal).
    """
    dims = partition.counts.shape
    asked_flat = (
        np.fromiter((np.ravel_multi_index(v, dims) for v in asked), dtype=np.int64)
        if asked
        else np.zeros(0, dtype=np.int64)
    )
    ranked = sorted(partition.regions, key=lambda r: (-r.score, -r.size, r.min_flat))
    for region in ranked:
        flat = np.ravel_multi_index(region.voxels.T, dims)
        open_mask = ~np.isin(flat, asked_flat)
        if not open_mask.any():
            continue
        rounded = np.floor(region.centroid + 0.5).astype(np.int64)
        in_region = np.nonzero((region.voxels == rounded).all(axis=1))[0]
        if in_region.size and open_mask[in_region[0]]:
            return tuple(int(c) for c in rounded)
        open_voxels = region.voxels[open_mask]
        open_flat = flat[open_mask]
        d2 = ((open_voxels - region.centroid) ** 2).sum(axis=1)
        best = np.lexsort((open_flat, d2))[0]
        return tuple(int(c) for c in open_voxels[best])
    return None


def oracle_answer(gt: BinaryMask, voxel) -> int:
    """The simulated user: reads the ground-truth label at the voxel."""
    x, y, z = (int(c) for c in voxel)
    if not (0 <= x < gt.dims[0] and 0 <= y < gt.dims[1] and 0 <= z < gt.dims[2]):
        raise ValueError(f"voxel {voxel} outside lattice {gt.dims}")
    return int(gt.data[x, y, z])


@dataclass
class QuestionView:
    """What a client needs to pose one question."""

    voxel: tuple[int, int, int]
    question_index: int
    remaining: int
    beta: float
    axis: str
    slice_index: int
    disagreement_size: int

    def to_json(self) -> dict:
        return {
            "voxel": list(self.voxel),
            "question_index": self.question_index,
            "remaining": self.remaining,
            "beta": self.beta,
            "axis": self.axis,
            "slice_index": self.slice_index,
            "disagreement_size": self.disagreement_size,
        }


@dataclass
class FinalResult:
    mask: BinaryMask
    state: ShapeState
    score: float
    log_lik: float
    pen: float
    violated_count: int

    def state_json(self) -> dict:
        return {
            "scale": self.state.scale,
            "translation": list(self.state.translation),
            "rotation": list(self.state.rotation),
            "coeffs": list(self.state.coeffs),
        }


@dataclass
class _Pending:
    voxel: tuple[int, int, int]
    samples: SampleSet
    partition: UncertaintyPartition
    millis: float
    view: QuestionView


class Session:
    """Single-writer interactive segmentation session.

    The probability map is digested once into per-voxel log-odds so each
    chain step only has to sum them over the candidate foreground.  All
    randomness flows from one seed sequence, so a session is reproducible
    from (inputs, configs, rng_seed) plus the answer sequence.
    """

    def __init__(
        self,
        pmap: ScalarField3D,
        model: ShapeModel,
        *,
        sampler_cfg: SamplerConfig | None = None,
        beta_cfg: BetaConfig | None = None,
        question_budget: int = 30,
        rng_seed: int = 0,
        volume: ScalarField3D | None = None,
        ground_truth: BinaryMask | None = None,
        question_policy: Literal["uncertainty", "random"] = "uncertainty",
        adapt_beta: bool = True,
        explore_cold_chain: bool = True,
    ) -> None:
        self.pmap = pmap
        self.model = model
        self.dims = pmap.dims
        self.volume = volume
        self.ground_truth = ground_truth
        self.sampler_cfg = sampler_cfg or SamplerConfig()
        self.beta_cfg = beta_cfg or BetaConfig()
        self.question_budget = int(question_budget)
        self.question_policy = question_policy
        self.adapt_beta = adapt_beta
        self.explore_cold_chain = explore_cold_chain
        self.rng_seed = int(rng_seed)

        if volume is not None and volume.dims != self.dims:
            raise ValueError("volume dims do not match map dims")
        if ground_truth is not None and ground_truth.dims != self.dims:
            raise ValueError("ground truth dims do not match map dims")

        p = pmap.data
        if p.min() <= 0.0 or p.max() >= 1.0:
            raise ValueError("probability map must be clamped inside (0, 1)")
        self._logit = np.ascontiguousarray(np.log(p) - np.log1p(-p))
        self._log_comp = float(np.log1p(-p).sum())
        self._n_vox = pmap.n_voxels

        self.beta = self.beta_cfg.beta0
        self.seeds: list[Seed] = []
        self.asked: set[tuple[int, int, int]] = set()
        self.telemetry: list[dict] = []
        self.converged = False

        self._pending: _Pending | None = None
        self._warm = identity_state(model.n)
        self._seed_seq = np.random.SeedSequence(self.rng_seed)
        self._y0 = np.empty(model.ref_dims, dtype=np.float64)
        self._sqrt_lam = model.sqrt_eigenvalues
        factor = self.sampler_cfg.translation_bound_factor
        self._translation_bounds = (
            tuple(factor * d for d in self.dims) if factor > 0 else None
        )

        lo, hi = model.support_box()
        ref = np.array(model.ref_dims)
        self._fill_lo = np.maximum(lo - 1, 0)
        self._fill_hi = np.minimum(hi + 2, ref - 1)
        self._test_lo = (lo - 1).astype(np.float64)
        self._test_hi = (hi + 1).astype(np.float64)
        # model-space corners whose forward image bounds the foreground
        self._test_corners = np.array(
            [
                [self._test_lo[0] if cx == 0 else self._test_hi[0],
                 self._test_lo[1] if cy == 0 else self._test_hi[1],
                 self._test_lo[2] if cz == 0 else self._test_hi[2]]
                for cx in range(2)
                for cy in range(2)
                for cz in range(2)
            ]
        )

    # -- scoring ------------------------------------------------------------

    def _combine(self, state: ShapeState) -> None:
        coeffs = np.asarray(state.coeffs, dtype=np.float64)
        _kernels.combine_modes(
            self.model.mu_arr,
            self.model.psi_arr,
            coeffs,
            int(self._fill_lo[0]), int(self._fill_hi[0]) + 1,
            int(self._fill_lo[1]), int(self._fill_hi[1]) + 1,
            int(self._fill_lo[2]), int(self._fill_hi[2]) + 1,
            self._y0,
        )

    def _negative_box(self):
        """Inclusive model-space bbox of this state's negative field values
        (the combined buffer must be current); None when the field is
        nonnegative everywhere."""
        x0, x1 = int(self._fill_lo[0]), int(self._fill_hi[0]) + 1
        n_rows = x1 - x0
        row_any = np.empty(n_rows, dtype=np.bool_)
        row_ylo = np.empty(n_rows, dtype=np.int64)
        row_yhi = np.empty(n_rows, dtype=np.int64)
        row_zlo = np.empty(n_rows, dtype=np.int64)
        row_zhi = np.empty(n_rows, dtype=np.int64)
        _kernels.negative_bbox_rows(
            self._y0,
            x0, x1,
            int(self._fill_lo[1]), int(self._fill_hi[1]) + 1,
            int(self._fill_lo[2]), int(self._fill_hi[2]) + 1,
            row_any, row_ylo, row_yhi, row_zlo, row_zhi,
        )
        if not row_any.any():
            return None
        rows = np.flatnonzero(row_any)
        lo = np.array([x0 + rows[0], row_ylo[rows].min(), row_zlo[rows].min()])
        hi = np.array([x0 + rows[-1], row_yhi[rows].max(), row_zhi[rows].max()])
        return lo, hi

    def _geometry(self, state: ShapeState, neg_box):
        """Affine map plus output bbox and model-space gate for one state."""
        a_mat, offset = state_transform(self.model, state, self.dims)
        neg_lo, neg_hi = neg_box
        test_lo = neg_lo.astype(np.float64) - 1.0
        test_hi = neg_hi.astype(np.float64) + 1.0
        corners = np.array(
            [
                [test_lo[0] if cx == 0 else test_hi[0],
                 test_lo[1] if cy == 0 else test_hi[1],
                 test_lo[2] if cz == 0 else test_hi[2]]
                for cx in range(2)
                for cy in range(2)
                for cz in range(2)
            ]
        )
        fwd_lin = rotation_matrix(*state.rotation) * state.scale
        c_out = (np.array(self.dims, dtype=np.float64) - 1.0) / 2.0
        c_model = (np.array(self.model.ref_dims, dtype=np.float64) - 1.0) / 2.0
        fwd = (fwd_lin @ (corners - c_model).T).T + c_out + np.array(state.translation)
        lo = np.maximum(np.floor(fwd.min(axis=0)).astype(np.int64) - 1, 0)
        hi = np.minimum(np.ceil(fwd.max(axis=0)).astype(np.int64) + 1, np.array(self.dims) - 1)
        return a_mat, offset, lo, hi, test_lo, test_hi

    def _seed_penalty(self, state: ShapeState) -> float:
        if not self.seeds:
            return 0.0
        pts = np.array([s.location for s in self.seeds], dtype=np.float64)
        out = np.empty(pts.shape[0])
        a_mat, offset = state_transform(self.model, state, self.dims)
        coeffs = np.asarray(state.coeffs, dtype=np.float64)
        _kernels.eval_state_at_points(
            self.model.mu_arr, self.model.psi_arr, coeffs,
            a_mat[0, 0], a_mat[0, 1], a_mat[0, 2],
            a_mat[1, 0], a_mat[1, 1], a_mat[1, 2],
            a_mat[2, 0], a_mat[2, 1], a_mat[2, 2],
            offset[0], offset[1], offset[2],
            state.scale, lattice_diagonal(self.dims), pts, out,
        )
        return penalty_from_values(out, self.seeds)

    def score_state(self, state: ShapeState) -> float:
        """Posterior score of a state under the current beta and seed log."""
        self._combine(state)
        neg_box = self._negative_box()
        if neg_box is None:
            log_lik = min(self._log_comp / self._n_vox, 0.0)
        else:
            a_mat, offset, lo, hi, test_lo, test_hi = self._geometry(state, neg_box)
            if np.any(lo > hi):
                log_lik = min(self._log_comp / self._n_vox, 0.0)
            else:
                n_rows = int(hi[0] - lo[0] + 1)
                partial_w = np.empty(n_rows)
                partial_n = np.empty(n_rows, dtype=np.int64)
                _kernels.masked_weight_stats(
                    self._y0,
                    a_mat[0, 0], a_mat[0, 1], a_mat[0, 2],
                    a_mat[1, 0], a_mat[1, 1], a_mat[1, 2],
                    a_mat[2, 0], a_mat[2, 1], a_mat[2, 2],
                    offset[0], offset[1], offset[2],
                    self._logit,
                    int(lo[0]), int(hi[0]) + 1,
                    int(lo[1]), int(hi[1]) + 1,
                    int(lo[2]), int(hi[2]) + 1,
                    test_lo[0], test_hi[0],
                    test_lo[1], test_hi[1],
                    test_lo[2], test_hi[2],
                    partial_w, partial_n,
                )
                log_lik = min((self._log_comp + float(partial_w.sum())) / self._n_vox, 0.0)
        return posterior_score(log_lik, self._seed_penalty(state), self.beta)

    def materialize_mask(self, state: ShapeState) -> BinaryMask:
        """Thresholded segmentation of a state on the session lattice."""
        self._combine(state)
        neg_box = self._negative_box()
        out = np.zeros(self.dims, dtype=np.uint8)
        if neg_box is not None:
            a_mat, offset, lo, hi, test_lo, test_hi = self._geometry(state, neg_box)
            if not np.any(lo > hi):
                _kernels.masked_fill(
                    self._y0,
                    a_mat[0, 0], a_mat[0, 1], a_mat[0, 2],
                    a_mat[1, 0], a_mat[1, 1], a_mat[1, 2],
                    a_mat[2, 0], a_mat[2, 1], a_mat[2, 2],
                    offset[0], offset[1], offset[2],
                    int(lo[0]), int(hi[0]) + 1,
                    int(lo[1]), int(hi[1]) + 1,
                    int(lo[2]), int(hi[2]) + 1,
                    test_lo[0], test_hi[0],
                    test_lo[1], test_hi[1],
                    test_lo[2], test_hi[2],
                    out,
                )
        return BinaryMask(self.dims, out, self.pmap.spacing)

    # -- the loop -----------------------------------------------------------

    @property
    def n_answered(self) -> int:
        return len(self.seeds)

    def _run_pass(self) -> SampleSet:
        """One sampling pass: a warm refinement chain plus (by default) a
        cold chain restarted at the identity state.

        The cold chain keeps probing the prior's neighborhood even when the
        warm chain has moved away, so a misleading map cannot permanently
        steer every candidate off the object.  Retained samples from both
        chains form the candidate set (the per-chain burn-in/thin schedule is
        unchanged)."""
        cfg = self.sampler_cfg
        n_cold = cfg.n_samples // 2 if self.explore_cold_chain else 0
        chains = []
        if n_cold:
            chains.append((replace(cfg, n_samples=cfg.n_samples - n_cold), self._warm))
            chains.append((replace(cfg, n_samples=n_cold), identity_state(self.model.n)))
        else:
            chains.append((cfg, self._warm))

        merged: SampleSet | None = None
        for chain_cfg, init in chains:
            rng = np.random.default_rng(self._seed_seq.spawn(1)[0])
            samples = run_chain(
                init,
                self.score_state,
                chain_cfg,
                rng,
                sqrt_eigenvalues=self._sqrt_lam,
                bound_factor=self.model.bound_factor,
                translation_bounds=self._translation_bounds,
                mask_fn=self.materialize_mask,
            )
            if merged is None:
                merged = samples
            else:
                keep_best = samples if samples.best_score > merged.best_score else merged
                merged = SampleSet(
                    states=merged.states + samples.states,
                    scores=merged.scores + samples.scores,
                    masks=merged.masks + samples.masks,
                    n_steps=merged.n_steps + samples.n_steps,
                    n_accepted=merged.n_accepted + samples.n_accepted,
                    best_state=keep_best.best_state,
                    best_score=keep_best.best_score,
                )
        # sticky warm start: adopt the pass's best state only if it beats the
        # current anchor under the current posterior, so the anchor ratchets
        # uphill instead of following chain diffusion
        if merged.best_score >= self.score_state(self._warm):
            self._warm = merged.best_state
        return merged

    def ask(self) -> QuestionView:
        """Compute (or repeat) the next question.  Idempotent until answered."""
        if self._pending is not None:
            return self._pending.view
        if self.converged:
            raise SessionConverged("all candidates agree; nothing informative to ask")
        if self.n_answered >= self.question_budget:
            raise BudgetExhausted(f"question budget {self.question_budget} used up")

        t0 = time.perf_counter()
        samples = self._run_pass()
        partition = build_partition(samples)
        if self.question_policy == "random":
            voxel = self._random_voxel()
        else:
            voxel = select_question(partition, self.asked)
        millis = (time.perf_counter() - t0) * 1000.0

        if voxel is None:
            self.converged = True
            raise SessionConverged("all candidates agree; nothing informative to ask")

        view = QuestionView(
            voxel=voxel,
            question_index=self.n_answered,
            remaining=self.question_budget - self.n_answered,
            beta=self.beta,
            axis="z",
            slice_index=voxel[2],
            disagreement_size=partition.disagreement_size,
        )
        self._pending = _Pending(voxel, samples, partition, millis, view)
        return view

    def _random_voxel(self) -> tuple[int, int, int] | None:
        if len(self.asked) >= self._n_vox:
            return None
        rng = np.random.default_rng(self._seed_seq.spawn(1)[0])
        while True:
            flat = int(rng.integers(self._n_vox))
            voxel = tuple(int(c) for c in np.unravel_index(flat, self.dims))
            if voxel not in self.asked:
                return voxel

    def answer(self, label: int) -> dict:
        """Ingest the user's label for the pending question."""
        if self._pending is None:
            raise NoPendingQuestion("no question is awaiting an answer")
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label}")

        pending = self._pending
        voxel = pending.voxel
        map_value = float(self.pmap.data[voxel])
        seed = Seed(voxel, int(label), self.n_answered, map_value)
        eps = agreement_epsilon(map_value, label)
        if self.adapt_beta:
            self.beta = update_beta(self.beta, eps, map_value, self.beta_cfg)

        self.seeds.append(seed)
        self.asked.add(voxel)

        record = {
            "k": seed.question_index,
            "voxel": list(voxel),
            "label": int(label),
            "epsilon": eps,
            "beta": self.beta,
            "acceptance_rate": pending.samples.acceptance_rate,
            "disagreement": pending.partition.disagreement_size,
            "millis": pending.millis,
        }
        if self.ground_truth is not None:
            best_idx = int(np.argmax(pending.samples.scores))
            record["dsc"] = dice(pending.samples.masks[best_idx], self.ground_truth)
        self.telemetry.append(record)
        self._pending = None
        return record

    def final_segmentation(self) -> FinalResult:
        """Fresh sampling pass at the frozen beta; best state wins.

        The warm-start state enters as an explicit candidate, so the result
        never scores below the best state seen during questioning.
        """
        anchor = self._warm
        samples = self._run_pass()
        states = list(samples.states) + [anchor]
        scores = list(samples.scores) + [self.score_state(anchor)]
        masks = list(samples.masks) + [self.materialize_mask(anchor)]
        idx = int(np.argmax(scores))
        state, score, mask = states[idx], scores[idx], masks[idx]

        violated = violated_seeds(self.model, state, self.seeds, self.dims)
        pen = self._seed_penalty(state)
        log_lik = log_likelihood(mask, self.pmap)
        return FinalResult(
            mask=mask,
            state=state,
            score=score,
            log_lik=log_lik,
            pen=pen,
            violated_count=len(violated),
        )

    def overlay_snapshot(self) -> dict:
        """Read-only view of the current candidate field for rendering."""
        snap: dict = {
            "n_candidates": self.sampler_cfg.n_samples,
            "counts": None,
            "best_mask": None,
            "question": None,
        }
        if self._pending is not None:
            pending = self._pending
            snap["counts"] = pending.partition.counts
            best_idx = int(np.argmax(pending.samples.scores))
            snap["best_mask"] = pending.samples.masks[best_idx].data
            snap["question"] = pending.voxel
        return snap


def run_simulation(
    gt: BinaryMask,
    pmap: ScalarField3D,
    model: ShapeModel,
    question_budget: int,
    *,
    sampler_cfg: SamplerConfig | None = None,
    beta_cfg: BetaConfig | None = None,
    rng_seed: int = 0,
    question_policy: Literal["uncertainty", "random"] = "uncertainty",
    adapt_beta: bool = True,
    with_thresholded_baseline: bool = True,
    with_random_baseline: bool = False,
    volume: ScalarField3D | None = None,
) -> dict:
    """Drive a full session with the ground-truth oracle and report it.

    The report carries the per-question telemetry, the final segmentation
    diagnostics, and (optionally) the thresholded-map and random-question
    baselines, the latter re-run with the same seed for a paired comparison.
    """
    session = Session(
        pmap,
        model,
        sampler_cfg=sampler_cfg,
        beta_cfg=beta_cfg,
        question_budget=question_budget,
        rng_seed=rng_seed,
        volume=volume,
        ground_truth=gt,
        question_policy=question_policy,
        adapt_beta=adapt_beta,
    )
    for _ in range(question_budget):
        try:
            view = session.ask()
        except SessionConverged:
            break
        session.answer(oracle_answer(gt, view.voxel))

    final = session.final_segmentation()
    report = {
        "config": {
            "question_budget": question_budget,
            "rng_seed": rng_seed,
            "question_policy": question_policy,
            "adapt_beta": adapt_beta,
            "sampler": vars(session.sampler_cfg) | {"scale_bounds": list(session.sampler_cfg.scale_bounds)},
            "beta": vars(session.beta_cfg),
        },
        "questions": session.telemetry,
        "final": {
            "dsc": dice(final.mask, gt),
            "state": final.state_json(),
            "score": final.score,
            "log_likelihood": final.log_lik,
            "penalty": final.pen,
            "violated_count": final.violated_count,
            "beta": session.beta,
            "n_questions": session.n_answered,
            "converged_early": session.converged,
        },
        "baselines": {},
    }
    if with_thresholded_baseline:
        thresholded = BinaryMask(pmap.dims, (pmap.data >= 0.5).astype(np.uint8), pmap.spacing)
        report["baselines"]["thresholded_dsc"] = dice(thresholded, gt)
    if with_random_baseline:
        report["baselines"]["random"] = run_simulation(
            gt,
            pmap,
            model,
            question_budget,
            sampler_cfg=sampler_cfg,
            beta_cfg=beta_cfg,
            rng_seed=rng_seed,
            question_policy="random",
            adapt_beta=adapt_beta,
            with_thresholded_baseline=False,
            with_random_baseline=False,
            volume=volume,
        )
    return report
