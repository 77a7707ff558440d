"""Per-voxel object-probability maps.

Three constructors: a boosted classifier over 3D Haar-like box features
(trained on labeled volumes), a clamped blur of a ground-truth mask, and a
translated blur whose thresholded overlap with the original mask is zero.
All maps are clamped to [EPS_P, 1 - EPS_P] so downstream logarithms stay
finite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .volume import BinaryMask, ScalarField3D, dice, gaussian_blur

EPS_P = 1e-6


class ProbabilityMap(ScalarField3D):
    """ScalarField3D constrained to the open unit interval via clamping."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.data.min() < EPS_P or self.data.max() > 1.0 - EPS_P:
            raise ValueError("probability values must lie in [EPS_P, 1-EPS_P]")


def clamp_probabilities(fld: ScalarField3D) -> ProbabilityMap:
    data = np.clip(fld.data, EPS_P, 1.0 - EPS_P)
    return ProbabilityMap(fld.dims, data, fld.spacing, meta=dict(fld.meta))


def integral_volume(fld: ScalarField3D) -> ScalarField3D:
    """I(x,y,z) = sum of the field over [0..x] x [0..y] x [0..z]."""
    acc = fld.data.cumsum(axis=0).cumsum(axis=1).cumsum(axis=2)
    return ScalarField3D(fld.dims, acc, fld.spacing)


def _padded(iv: ScalarField3D) -> np.ndarray:
    """Zero-pad the integral volume in front so box sums need no branches."""
    j = np.zeros(tuple(d + 1 for d in iv.dims))
    j[1:, 1:, 1:] = iv.data
    return j


def _box_sums(j: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Inclusion-exclusion sums for inclusive boxes [lo, hi], shape (k, 3)."""
    x0, y0, z0 = lo[..., 0], lo[..., 1], lo[..., 2]
    x1, y1, z1 = hi[..., 0] + 1, hi[..., 1] + 1, hi[..., 2] + 1
    return (
        j[x1, y1, z1]
        - j[x0, y1, z1]
        - j[x1, y0, z1]
        - j[x1, y1, z0]
        + j[x0, y0, z1]
        + j[x0, y1, z0]
        + j[x1, y0, z0]
        - j[x0, y0, z0]
    )


@dataclass(frozen=True)
class HaarFeature:
    """One or two axis-aligned boxes, each with a sign, anchored at the query
    voxel; evaluated as the signed sum of box means.  With ``normalize`` the
    local patch mean is subtracted from every box mean."""

    offsets: tuple[tuple[int, int, int], ...]
    sizes: tuple[tuple[int, int, int], ...]
    signs: tuple[int, ...]
    normalize: bool = False
    patch_radius: int = 4

    def __post_init__(self) -> None:
        if not (1 <= len(self.offsets) <= 2) or len(self.sizes) != len(self.offsets) or len(
            self.signs
        ) != len(self.offsets):
            raise ValueError("feature needs one or two (offset, size, sign) boxes")
        r = self.patch_radius
        for off, size in zip(self.offsets, self.sizes):
            if min(size) < 1:
                raise ValueError(f"box size must be >= 1, got {size}")
            for o, s in zip(off, size):
                if o < -r or o + s - 1 > r:
                    raise ValueError("box exceeds the feature patch radius")


def random_haar_features(
    count: int, rng: np.random.Generator, patch_radius: int = 4
) -> list[HaarFeature]:
    """Random pool: half single-box means, half two-box mean differences."""
    feats = []
    r = patch_radius
    for k in range(count):
        n_boxes = 1 if k % 2 == 0 else 2
        offsets, sizes = [], []
        for _ in range(n_boxes):
            size = tuple(int(rng.integers(1, 2 * r + 2)) for _ in range(3))
            off = tuple(int(rng.integers(-r, r - s + 2)) for s in size)
            offsets.append(off)
            sizes.append(size)
        signs = (1,) if n_boxes == 1 else (1, -1)
        feats.append(
            HaarFeature(tuple(offsets), tuple(sizes), signs, patch_radius=patch_radius)
        )
    return feats


def haar_eval_batch(
    padded_iv: np.ndarray, dims, feature: HaarFeature, voxels: np.ndarray
) -> np.ndarray:
    """Feature values at many voxels from a padded integral volume.

    Boxes are clipped to the lattice and averaged over their clipped voxel
    count; a box entirely outside contributes zero.
    """
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    limit = np.array(dims, dtype=np.int64) - 1
    out = np.zeros(voxels.shape[0])

    patch_term = 0.0
    if feature.normalize:
        r = feature.patch_radius
        lo = np.clip(voxels - r, 0, limit)
        hi = np.clip(voxels + r, 0, limit)
        counts = (hi - lo + 1).prod(axis=1)
        patch_term = _box_sums(padded_iv, lo, hi) / counts

    for off, size, sign in zip(feature.offsets, feature.sizes, feature.signs):
        lo = voxels + np.asarray(off, dtype=np.int64)
        hi = lo + np.asarray(size, dtype=np.int64) - 1
        oob = np.any((hi < 0) | (lo > limit), axis=1)
        lo_c = np.clip(lo, 0, limit)
        hi_c = np.clip(hi, 0, limit)
        counts = (hi_c - lo_c + 1).prod(axis=1)
        means = _box_sums(padded_iv, lo_c, hi_c) / counts
        if feature.normalize:
            means = means - patch_term
        out += np.where(oob, 0.0, sign * means)
    return out


def haar_eval(iv: ScalarField3D, feature: HaarFeature, voxel) -> float:
    """Feature value at a single voxel (see haar_eval_batch)."""
    padded = _padded(iv)
    return float(haar_eval_batch(padded, iv.dims, feature, np.array([voxel]))[0])


# ---------------------------------------------------------------------------
# Boosting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stump:
    feature: HaarFeature
    threshold: float
    polarity: int  # +1: predict inside when value > threshold
    alpha: float


@dataclass
class BoostedModel:
    stumps: list[Stump]
    sigmoid_scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.stumps:
            raise ValueError("model needs at least one stump")
        if any(not math.isfinite(s.alpha) or s.alpha < 0 for s in self.stumps):
            raise ValueError("stump weights must be finite and nonnegative")


_ALPHA_CAP = 0.5 * math.log(1e6)


def _candidate_thresholds(column: np.ndarray, cap: int) -> np.ndarray:
    """Midpoints between consecutive sorted unique values of a subsample,
    plus a sentinel below the minimum (the 'everything above' stump)."""
    uniq = np.unique(column)
    if uniq.size > cap:
        idx = np.linspace(0, uniq.size - 1, cap).round().astype(int)
        uniq = uniq[np.unique(idx)]
    thresholds = [uniq[0] - 1.0]
    thresholds.extend((uniq[:-1] + uniq[1:]) / 2.0)
    return np.asarray(thresholds)


def train_adaboost(
    features: list[HaarFeature],
    samples: list[tuple[tuple[int, int, int], int, object]],
    volumes: dict,
    rounds: int,
    *,
    threshold_subsample: int = 64,
) -> BoostedModel:
    """Discrete AdaBoost over decision stumps on the feature pool.

    samples are (voxel, label in {0,1}, volume id); volumes maps each id to
    its ScalarField3D.  Each round picks the (feature, threshold, polarity)
    stump with the lowest weighted error; training stops early on a perfect
    stump (capped weight) or when no stump beats chance.
    """
    if rounds < 1:
        raise ValueError("need at least one boosting round")
    labels = np.array([s[1] for s in samples], dtype=np.int64)
    if labels.size == 0 or labels.min() == labels.max():
        raise ValueError("training samples must contain both labels")
    y = np.where(labels == 1, 1.0, -1.0)
    n = len(samples)

    # feature matrix, one padded integral volume per training volume
    x = np.empty((n, len(features)))
    by_volume: dict[object, list[int]] = {}
    for i, (_, _, vid) in enumerate(samples):
        by_volume.setdefault(vid, []).append(i)
    for vid, idx in by_volume.items():
        vol = volumes[vid]
        padded = _padded(integral_volume(vol))
        voxels = np.array([samples[i][0] for i in idx], dtype=np.int64)
        for j, feat in enumerate(features):
            x[idx, j] = haar_eval_batch(padded, vol.dims, feat, voxels)

    order = np.argsort(x, axis=0)
    thresholds = [_candidate_thresholds(x[:, j], threshold_subsample) for j in range(x.shape[1])]

    w = np.full(n, 1.0 / n)
    stumps: list[Stump] = []
    for _ in range(rounds):
        best = None  # (err, j, threshold, polarity)
        for j in range(x.shape[1]):
            col_sorted = x[order[:, j], j]
            w_sorted = w[order[:, j]]
            y_sorted = y[order[:, j]]
            cum_pos = np.concatenate(([0.0], np.cumsum(w_sorted * (y_sorted > 0))))
            cum_neg = np.concatenate(([0.0], np.cumsum(w_sorted * (y_sorted < 0))))
            tot_pos, tot_neg = cum_pos[-1], cum_neg[-1]
            ks = np.searchsorted(col_sorted, thresholds[j], side="right")
            err_plus = cum_pos[ks] + (tot_neg - cum_neg[ks])
            err_minus = (tot_pos + tot_neg) - err_plus
            for errs, pol in ((err_plus, 1), (err_minus, -1)):
                k = int(np.argmin(errs))
                if best is None or errs[k] < best[0] - 1e-15:
                    best = (float(errs[k]), j, float(thresholds[j][k]), pol)

        err, j, thr, pol = best
        if err >= 0.5:
            break
        pred = np.where(pol * (x[:, j] - thr) > 0, 1.0, -1.0)
        if err <= 0.0:
            stumps.append(Stump(features[j], thr, pol, _ALPHA_CAP))
            break
        alpha = 0.5 * math.log((1.0 - err) / err)
        stumps.append(Stump(features[j], thr, pol, alpha))
        w = w * np.exp(-alpha * y * pred)
        w /= w.sum()

    if not stumps:
        raise ValueError("no stump beat chance in the first round")
    return BoostedModel(stumps)


def predict_map(model: BoostedModel, volume: ScalarField3D) -> ProbabilityMap:
    """Sigmoid-calibrated, clamped boosted score over every voxel."""
    padded = _padded(integral_volume(volume))
    nx, ny, nz = volume.dims
    score = np.zeros(volume.dims)
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    for z0 in range(0, nz, 8):
        z1 = min(z0 + 8, nz)
        zs = np.arange(z0, z1)
        voxels = np.stack(
            [
                np.broadcast_to(gx[..., None], (nx, ny, zs.size)).ravel(),
                np.broadcast_to(gy[..., None], (nx, ny, zs.size)).ravel(),
                np.broadcast_to(zs[None, None, :], (nx, ny, zs.size)).ravel(),
            ],
            axis=1,
        )
        h = np.zeros(voxels.shape[0])
        for stump in model.stumps:
            vals = haar_eval_batch(padded, volume.dims, stump.feature, voxels)
            h += stump.alpha * np.where(stump.polarity * (vals - stump.threshold) > 0, 1.0, -1.0)
        score[:, :, z0:z1] = h.reshape(nx, ny, zs.size)
    prob = expit(model.sigmoid_scale * score)
    return clamp_probabilities(ScalarField3D(volume.dims, prob, volume.spacing))


def save_boosted(model: BoostedModel, path: str | Path) -> None:
    doc = {
        "sigmoid_scale": model.sigmoid_scale,
        "stumps": [
            {
                "offsets": [list(o) for o in s.feature.offsets],
                "sizes": [list(z) for z in s.feature.sizes],
                "signs": list(s.feature.signs),
                "normalize": s.feature.normalize,
                "patch_radius": s.feature.patch_radius,
                "threshold": s.threshold,
                "polarity": s.polarity,
                "alpha": s.alpha,
            }
            for s in model.stumps
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2), encoding="ascii")


def load_boosted(path: str | Path) -> BoostedModel:
    doc = json.loads(Path(path).read_text(encoding="ascii"))
    stumps = [
        Stump(
            HaarFeature(
                tuple(tuple(o) for o in s["offsets"]),
                tuple(tuple(z) for z in s["sizes"]),
                tuple(s["signs"]),
                normalize=s["normalize"],
                patch_radius=s["patch_radius"],
            ),
            s["threshold"],
            s["polarity"],
            s["alpha"],
        )
        for s in doc["stumps"]
    ]
    return BoostedModel(stumps, sigmoid_scale=doc["sigmoid_scale"])


# ---------------------------------------------------------------------------
# Synthetic maps
# ---------------------------------------------------------------------------


def synthetic_blurred(gt: BinaryMask, sigma: float) -> ProbabilityMap:
    """A trustworthy map: the ground truth softened by a Gaussian."""
    blurred = gaussian_blur(ScalarField3D(gt.dims, gt.data.astype(np.float64), gt.spacing), sigma)
    return clamp_probabilities(blurred)


def _shift_mask(mask: BinaryMask, offset: np.ndarray) -> BinaryMask:
    out = np.zeros_like(mask.data)
    src_lo = np.maximum(0, -offset)
    src_hi = np.minimum(mask.dims, np.array(mask.dims) - offset)
    dst_lo = src_lo + offset
    dst_hi = src_hi + offset
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = mask.data[
        src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
    ]
    return BinaryMask(mask.dims, out, mask.spacing)


def synthetic_translated(gt: BinaryMask, sigma: float) -> ProbabilityMap:
    """A misleading map: the blurred ground truth moved until it shares no
    voxel with the original, even after thresholding the blur at 0.5.

    The shift runs along the axis direction with the most room between the
    foreground and the volume border, at the smallest magnitude keeping the
    whole foreground inside.  The offset is recorded in the map's meta.
    """
    fg = np.argwhere(gt.data > 0)
    if fg.size == 0:
        raise ValueError("ground truth mask is empty")
    lo = fg.min(axis=0)
    hi = fg.max(axis=0)

    options = []
    for axis in range(3):
        options.append((int(gt.dims[axis] - 1 - hi[axis]), axis, 1))
        options.append((int(lo[axis]), axis, -1))
    room, axis, direction = max(options, key=lambda o: o[0])

    for mag in range(1, room + 1):
        offset = np.zeros(3, dtype=int)
        offset[axis] = direction * mag
        shifted = _shift_mask(gt, offset)
        if dice(shifted, gt) > 0.0:
            continue
        pmap = clamp_probabilities(
            gaussian_blur(
                ScalarField3D(gt.dims, shifted.data.astype(np.float64), gt.spacing), sigma
            )
        )
        thresholded = BinaryMask(gt.dims, (pmap.data >= 0.5).astype(np.uint8), gt.spacing)
        if dice(thresholded, gt) == 0.0:
            pmap.meta["translation_offset"] = [int(v) for v in offset]
            return pmap
    raise ValueError("no zero-overlap translation exists within bounds")
