"""Signed distance transform vs the all-pairs brute-force oracle."""

import numpy as np
import pytest

from askseg.sdf import signed_distance
from askseg.volume import BinaryMask


def brute_force_sdf(mask: np.ndarray) -> np.ndarray:
    """O(|fg|*|bg|) nearest-opposite-voxel distances, negative inside."""
    fg = np.argwhere(mask > 0).astype(np.float64)
    bg = np.argwhere(mask == 0).astype(np.float64)
    out = np.empty(mask.shape)
    d_fg = np.sqrt(((fg[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    out[mask > 0] = -d_fg.min(axis=1)
    out[mask == 0] = d_fg.min(axis=0)
    return out


class TestSignedDistance:
    def test_single_voxel_center(self):
        data = np.zeros((5, 5, 5), dtype=np.uint8)
        data[2, 2, 2] = 1
        sdf = signed_distance(BinaryMask((5, 5, 5), data))
        assert sdf.data[2, 2, 2] == -1.0
        for nb in [(1, 2, 2), (3, 2, 2), (2, 1, 2), (2, 3, 2), (2, 2, 1), (2, 2, 3)]:
            assert sdf.data[nb] == 1.0
        assert np.allclose(sdf.data, brute_force_sdf(data))

    def test_two_voxel_slab(self):
        data = np.zeros((6, 6, 6), dtype=np.uint8)
        data[:, :, 2:4] = 1
        sdf = signed_distance(BinaryMask((6, 6, 6), data))
        assert np.all(sdf.data[:, :, 2:4] == -1.0)  # both slab layers touch background
        assert np.all(sdf.data[:, :, 1] == 1.0)
        assert np.all(sdf.data[:, :, 4] == 1.0)
        assert np.allclose(sdf.data, brute_force_sdf(data))

    def test_degenerate_all_ones(self):
        with pytest.raises(ValueError, match="degenerate"):
            signed_distance(BinaryMask((3, 3, 3), np.ones((3, 3, 3), dtype=np.uint8)))

    def test_degenerate_all_zeros(self):
        with pytest.raises(ValueError, match="degenerate"):
            signed_distance(BinaryMask((3, 3, 3), np.zeros((3, 3, 3), dtype=np.uint8)))

    def test_matches_brute_force_on_random_masks(self):
        # exact equality with the all-pairs oracle, 50 random 16^3 masks
        rng = np.random.default_rng(42)
        for trial in range(50):
            p = rng.uniform(0.05, 0.95)
            data = (rng.random((16, 16, 16)) < p).astype(np.uint8)
            if data.min() == data.max():
                continue
            sdf = signed_distance(BinaryMask((16, 16, 16), data))
            oracle = brute_force_sdf(data)
            assert np.allclose(sdf.data, oracle, atol=1e-9), f"trial {trial}"

    def test_threshold_recovers_mask(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            data = (rng.random((12, 12, 12)) < 0.3).astype(np.uint8)
            if data.min() == data.max():
                continue
            sdf = signed_distance(BinaryMask((12, 12, 12), data))
            assert np.array_equal((sdf.data < 0).astype(np.uint8), data)

    def test_lipschitz_on_neighbor_pairs(self):
        # 1-Lipschitz within each sign region; across the boundary the
        # zero-avoiding convention jumps by up to 2 (e.g. -1 next to +1,
        # as in the single-voxel case above), never more
        rng = np.random.default_rng(8)
        data = (rng.random((10, 10, 10)) < 0.4).astype(np.uint8)
        sdf = signed_distance(BinaryMask((10, 10, 10), data)).data
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(None, -1)
            hi[axis] = slice(1, None)
            a, b = sdf[tuple(lo)], sdf[tuple(hi)]
            diffs = np.abs(a - b)
            same_sign = (a < 0) == (b < 0)
            assert np.all(diffs[same_sign] <= 1.0 + 1e-9)
            assert np.all(diffs[~same_sign] <= 2.0 + 1e-9)
