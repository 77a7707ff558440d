"""Partition building, question selection, and the interactive loop."""

import numpy as np
import pytest

from askseg.posterior import BetaConfig
from askseg.probmap import synthetic_blurred
from askseg.sampler import SamplerConfig
from askseg.session import (
    BudgetExhausted,
    NoPendingQuestion,
    Session,
    SessionConverged,
    build_partition,
    oracle_answer,
    run_simulation,
    select_question,
)
from askseg.shapemodel import train
from askseg.volume import BinaryMask, dice


def masks_from_counts(counts, n):
    """n nested masks whose superposition reproduces a given count field."""
    masks = []
    for j in range(n):
        masks.append(BinaryMask(counts.shape, (counts > j).astype(np.uint8)))
    return masks


def flood_fill_regions(level_mask):
    """Brute-force 6-connected components as frozensets of voxel tuples."""
    remaining = {tuple(v) for v in np.argwhere(level_mask)}
    regions = []
    while remaining:
        frontier = [remaining.pop()]
        comp = set(frontier)
        while frontier:
            x, y, z = frontier.pop()
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nb = (x + dx, y + dy, z + dz)
                if nb in remaining:
                    remaining.remove(nb)
                    comp.add(nb)
                    frontier.append(nb)
        regions.append(frozenset(comp))
    return set(regions)


def sphere_mask(dims, radius, center=None):
    center = np.asarray(center if center is not None else (np.array(dims) - 1) / 2.0)
    grid = np.stack(np.meshgrid(*(np.arange(d) for d in dims), indexing="ij"), axis=-1)
    return BinaryMask(dims, (((grid - center) ** 2).sum(-1) <= radius**2).astype(np.uint8))


@pytest.fixture(scope="module")
def tiny_setup():
    dims = (32, 32, 32)
    masks = [sphere_mask(dims, r) for r in (6, 7, 8, 9)]
    model = train(masks, n=2)
    gt = sphere_mask(dims, 8)
    pmap = synthetic_blurred(gt, 1.5)
    return dims, model, gt, pmap


FAST = SamplerConfig(burn_in=20, thin=5, n_samples=8)


class TestBuildPartition:
    def test_identical_masks_give_no_regions(self):
        dims = (6, 6, 6)
        data = np.zeros(dims, dtype=np.uint8)
        data[2:4, 2:4, 2:4] = 1
        masks = [BinaryMask(dims, data)] * 5
        part = build_partition(masks)
        assert part.regions == []
        assert part.disagreement_size == 0

    def test_two_masks_one_block(self):
        dims = (8, 8, 8)
        base = np.zeros(dims, dtype=np.uint8)
        extra = base.copy()
        extra[2:5, 2:5, 2:5] = 1
        part = build_partition([BinaryMask(dims, base), BinaryMask(dims, extra)])
        assert len(part.regions) == 1
        region = part.regions[0]
        assert region.level == 1
        assert region.size == 27
        # with n=2 the only intermediate level sits exactly at half coverage
        assert region.score == pytest.approx(0.5)
        assert np.allclose(region.centroid, (3.0, 3.0, 3.0))

    def test_regions_match_flood_fill_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n = 4
            counts = rng.integers(0, n + 1, (4, 4, 4)).astype(np.int16)
            part = build_partition(masks_from_counts(counts, n))
            assert np.array_equal(part.counts, counts)
            for level in range(1, n):
                got = {
                    frozenset(tuple(v) for v in r.voxels)
                    for r in part.regions
                    if r.level == level
                }
                want = flood_fill_regions(counts == level)
                assert got == want

    def test_regions_disjoint_and_cover_intermediate(self):
        rng = np.random.default_rng(1)
        counts = rng.integers(0, 6, (5, 5, 5)).astype(np.int16)
        part = build_partition(masks_from_counts(counts, 5))
        seen = set()
        for r in part.regions:
            assert 0.0 <= r.score <= 0.5
            for v in map(tuple, r.voxels):
                assert v not in seen
                seen.add(v)
        expected = {tuple(v) for v in np.argwhere((counts > 0) & (counts < 5))}
        assert seen == expected


class TestSelectQuestion:
    def test_centroid_inside_unasked(self):
        dims = (8, 8, 8)
        base = np.zeros(dims, dtype=np.uint8)
        extra = base.copy()
        extra[2:5, 2:5, 2:5] = 1
        part = build_partition([BinaryMask(dims, base), BinaryMask(dims, extra)])
        assert select_question(part, set()) == (3, 3, 3)

    def test_centroid_outside_region_falls_back_to_nearest(self):
        # C-shaped region: centroid lands in the gap
        dims = (8, 8, 8)
        shape = np.zeros(dims, dtype=np.uint8)
        shape[2, 2:7, 2] = 1
        shape[2, 2, 3:5] = 1
        shape[2, 6, 3:5] = 1
        part = build_partition([BinaryMask(dims, np.zeros(dims, dtype=np.uint8)), BinaryMask(dims, shape)])
        voxel = select_question(part, set())
        voxels = {tuple(v) for v in part.regions[0].voxels}
        assert voxel in voxels
        centroid = part.regions[0].centroid
        dists = {v: ((np.array(v) - centroid) ** 2).sum() for v in voxels}
        assert dists[voxel] == min(dists.values())

    def test_asked_voxels_excluded(self):
        dims = (8, 8, 8)
        base = np.zeros(dims, dtype=np.uint8)
        extra = base.copy()
        extra[2:5, 2:5, 2:5] = 1
        part = build_partition([BinaryMask(dims, base), BinaryMask(dims, extra)])
        first = select_question(part, set())
        second = select_question(part, {first})
        assert second != first
        assert second in {tuple(v) for v in part.regions[0].voxels}

    def test_no_regions_signals_converged(self):
        dims = (4, 4, 4)
        masks = [BinaryMask(dims, np.zeros(dims, dtype=np.uint8))] * 3
        assert select_question(build_partition(masks), set()) is None

    def test_all_asked_signals_converged(self):
        dims = (6, 6, 6)
        base = np.zeros(dims, dtype=np.uint8)
        extra = base.copy()
        extra[2, 2, 2] = 1
        part = build_partition([BinaryMask(dims, base), BinaryMask(dims, extra)])
        assert select_question(part, {(2, 2, 2)}) is None

    def test_prefers_most_uncertain_then_largest(self):
        dims = (10, 10, 10)
        counts = np.zeros(dims, dtype=np.int16)
        counts[1, 1, 1] = 1  # level 1 of 4: score 0.25
        counts[5:8, 5:8, 5:8] = 2  # level 2 of 4: score 0.5
        counts[1, 8, 8] = 2  # smaller level-2 region
        part = build_partition(masks_from_counts(counts, 4))
        assert select_question(part, set()) == (6, 6, 6)


class TestOracle:
    def test_reads_ground_truth(self):
        gt = sphere_mask((8, 8, 8), 2)
        assert oracle_answer(gt, (3, 3, 3)) == 1
        assert oracle_answer(gt, (0, 0, 0)) == 0

    def test_out_of_bounds_rejected(self):
        gt = sphere_mask((8, 8, 8), 2)
        with pytest.raises(ValueError, match="outside"):
            oracle_answer(gt, (8, 0, 0))


class TestSessionLoop:
    def test_ask_idempotent_until_answered(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=0)
        v1 = ses.ask()
        v2 = ses.ask()
        assert v1.voxel == v2.voxel
        ses.answer(1)
        v3 = ses.ask()
        assert v3.question_index == 1

    def test_question_splits_candidates(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=1)
        view = ses.ask()
        counts = ses._pending.partition.counts
        c = counts[view.voxel]
        assert 0 < c < FAST.n_samples

    def test_answer_without_question_rejected(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=2)
        with pytest.raises(NoPendingQuestion):
            ses.answer(1)

    def test_budget_exhaustion(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, question_budget=2, rng_seed=3, ground_truth=gt)
        for _ in range(2):
            view = ses.ask()
            ses.answer(oracle_answer(gt, view.voxel))
        with pytest.raises(BudgetExhausted):
            ses.ask()

    def test_seed_log_grows_by_one_per_answer(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=4, ground_truth=gt)
        for k in range(3):
            view = ses.ask()
            assert len(ses.seeds) == k
            ses.answer(oracle_answer(gt, view.voxel))
            assert len(ses.seeds) == k + 1
            assert ses._pending is None
            assert len(ses.telemetry) == k + 1

    def test_beta_follows_epsilon_rules(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=5, ground_truth=gt)
        beta_before = ses.beta
        for _ in range(5):
            view = ses.ask()
            rec = ses.answer(oracle_answer(gt, view.voxel))
            if rec["epsilon"] == 1:
                assert rec["beta"] <= beta_before + 1e-12
            elif rec["epsilon"] == -1:
                assert rec["beta"] >= beta_before - 1e-12
            else:
                assert rec["beta"] == pytest.approx(beta_before)
            beta_before = rec["beta"]

    def test_deterministic_under_seed(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        voxels = []
        for _ in range(2):
            ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=42, ground_truth=gt)
            run = []
            for _ in range(3):
                view = ses.ask()
                run.append(view.voxel)
                ses.answer(oracle_answer(gt, view.voxel))
            voxels.append(run)
        assert voxels[0] == voxels[1]

    def test_fixed_beta_mode(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(
            pmap,
            model,
            sampler_cfg=FAST,
            beta_cfg=BetaConfig(beta0=2.0, learning_rate=3.0, beta_max=4.0),
            adapt_beta=False,
            rng_seed=6,
            ground_truth=gt,
        )
        for _ in range(3):
            view = ses.ask()
            ses.answer(oracle_answer(gt, view.voxel))
        assert ses.beta == 2.0

    def test_final_never_scores_below_anchor(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=7, ground_truth=gt)
        for _ in range(2):
            view = ses.ask()
            ses.answer(oracle_answer(gt, view.voxel))
        anchor_score = ses.score_state(ses._warm)
        final = ses.final_segmentation()
        assert final.score >= anchor_score - 1e-12

    def test_final_reports_consistent_violations(self, tiny_setup):
        from askseg.posterior import posterior_score, violated_seeds

        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=8, ground_truth=gt)
        for _ in range(4):
            view = ses.ask()
            ses.answer(oracle_answer(gt, view.voxel))
        final = ses.final_segmentation()
        violated = violated_seeds(model, final.state, ses.seeds, dims)
        assert final.violated_count == len(violated)
        assert posterior_score(final.log_lik, final.pen, ses.beta) == pytest.approx(
            final.score, rel=1e-9
        )

    def test_mask_fast_path_matches_reference(self, tiny_setup):
        from askseg.shapemodel import ShapeState, synthesize_field, to_mask

        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=9)
        rng = np.random.default_rng(10)
        for _ in range(20):
            state = ShapeState(
                scale=float(rng.uniform(0.6, 1.5)),
                translation=tuple(rng.uniform(-6, 6, 3)),
                rotation=tuple(rng.uniform(-0.4, 0.4, 3)),
                coeffs=tuple(rng.uniform(-1, 1, 2) * np.sqrt(model.eigenvalues)),
            )
            fast = ses.materialize_mask(state)
            ref = to_mask(synthesize_field(model, state, dims))
            assert np.array_equal(fast.data, ref.data)

    def test_score_fast_path_matches_reference(self, tiny_setup):
        from askseg.posterior import log_likelihood, penalty, posterior_score
        from askseg.shapemodel import ShapeState

        dims, model, gt, pmap = tiny_setup
        ses = Session(pmap, model, sampler_cfg=FAST, rng_seed=11, ground_truth=gt)
        for _ in range(2):
            view = ses.ask()
            ses.answer(oracle_answer(gt, view.voxel))
        rng = np.random.default_rng(12)
        for _ in range(10):
            state = ShapeState(
                scale=float(rng.uniform(0.7, 1.3)),
                translation=tuple(rng.uniform(-5, 5, 3)),
                rotation=tuple(rng.uniform(-0.3, 0.3, 3)),
                coeffs=tuple(rng.uniform(-1, 1, 2) * np.sqrt(model.eigenvalues)),
            )
            fast = ses.score_state(state)
            mask = ses.materialize_mask(state)
            reference = posterior_score(
                log_likelihood(mask, pmap), penalty(model, state, ses.seeds, dims), ses.beta
            )
            assert fast == pytest.approx(reference, rel=1e-9)

    def test_random_policy_draws_unasked_lattice_voxels(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        ses = Session(
            pmap, model, sampler_cfg=FAST, rng_seed=13, ground_truth=gt, question_policy="random"
        )
        seen = set()
        for _ in range(5):
            view = ses.ask()
            assert view.voxel not in seen
            seen.add(view.voxel)
            ses.answer(oracle_answer(gt, view.voxel))


class TestRunSimulation:
    def test_report_schema_and_baselines(self, tiny_setup):
        import json

        dims, model, gt, pmap = tiny_setup
        report = run_simulation(
            gt, pmap, model, 3, sampler_cfg=FAST, rng_seed=0, with_random_baseline=True
        )
        assert {"config", "questions", "final", "baselines"} <= set(report)
        for q in report["questions"]:
            assert {"k", "voxel", "label", "epsilon", "beta", "acceptance_rate", "millis", "dsc"} <= set(q)
        assert 0.0 <= report["final"]["dsc"] <= 1.0
        assert "thresholded_dsc" in report["baselines"]
        assert report["baselines"]["random"]["config"]["question_policy"] == "random"
        json.dumps(report)  # fully serializable

    def test_zero_questions_is_likelihood_only(self, tiny_setup):
        dims, model, gt, pmap = tiny_setup
        report = run_simulation(gt, pmap, model, 0, sampler_cfg=FAST, rng_seed=1)
        assert report["questions"] == []
        assert report["final"]["penalty"] == 0.0
        assert report["final"]["violated_count"] == 0
