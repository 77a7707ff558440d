"""PCA shape prior over signed distance fields and shape synthesis.

A trained model holds the mean field and the leading eigenmode fields of the
training distance fields.  A state (scale, translation, rotation angles, mode
coefficients) turns the model into a concrete segmentation: the mode
combination is warped through a similarity transform, sampled trilinearly,
rescaled so values stay in output-voxel distance units, and thresholded at
zero with "inside is negative".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .sdf import SignedDistanceField, signed_distance
from .volume import BinaryMask, ScalarField3D, load_mhd, save_mhd

Dims = tuple[int, int, int]


@dataclass(frozen=True)
class ShapeState:
    """Parameters selecting one segmentation from the shape space.

    scale > 0 multiplies the shape about the model-volume center; translation
    is in output voxels; rotation is intrinsic yaw-pitch-roll (Z, then Y, then
    X) in radians about the output-volume center; coeffs are the eigenmode
    coefficients.
    """

    scale: float = 1.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    coeffs: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not (self.scale > 0.0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "rotation", tuple(float(r) for r in self.rotation))
        object.__setattr__(self, "coeffs", tuple(float(b) for b in self.coeffs))

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.scale, *self.translation, *self.rotation, *self.coeffs], dtype=np.float64
        )

    @staticmethod
    def from_vector(vec: np.ndarray) -> "ShapeState":
        return ShapeState(
            scale=float(vec[0]),
            translation=(float(vec[1]), float(vec[2]), float(vec[3])),
            rotation=(float(vec[4]), float(vec[5]), float(vec[6])),
            coeffs=tuple(float(v) for v in vec[7:]),
        )


def identity_state(n_modes: int) -> ShapeState:
    return ShapeState(coeffs=(0.0,) * n_modes)


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Intrinsic Z-Y-X rotation: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cz, sz = math.cos(yaw), math.sin(yaw)
    cy, sy = math.cos(pitch), math.sin(pitch)
    cx, sx = math.cos(roll), math.sin(roll)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


@dataclass
class ShapeModel:
    """Mean field plus orthonormal eigenmode fields of the training ensemble.

    ``bound_factor`` caps mode coefficients at +-bound_factor*sqrt(eigenvalue)
    during sampling, which also bounds the region where synthesized fields can
    go negative (see ``support_box``).
    """

    ref_dims: Dims
    mean: SignedDistanceField
    modes: list[ScalarField3D]
    eigenvalues: np.ndarray
    n: int
    bound_factor: float = 3.0
    _support: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.ref_dims = tuple(int(d) for d in self.ref_dims)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        if self.n != len(self.modes) or self.n != self.eigenvalues.size:
            raise ValueError("mode count, eigenvalue count and n disagree")
        if np.any(np.diff(self.eigenvalues) > 1e-12):
            raise ValueError("eigenvalues must be nonincreasing")
        for f in (self.mean, *self.modes):
            if f.dims != self.ref_dims:
                raise ValueError("all model fields must share ref_dims")
        # contiguous stacks the kernels index directly
        self.mu_arr = np.ascontiguousarray(self.mean.data)
        self.psi_arr = (
            np.ascontiguousarray(np.stack([m.data for m in self.modes]))
            if self.modes
            else np.zeros((0, *self.ref_dims))
        )

    @property
    def sqrt_eigenvalues(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.eigenvalues, 0.0))

    def support_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Inclusive voxel bbox of the region where any in-bound state's
        combined field can be negative; everything outside is background."""
        if self._support is None:
            lower = self.mu_arr.copy()
            for i in range(self.n):
                lower -= self.bound_factor * self.sqrt_eigenvalues[i] * np.abs(self.psi_arr[i])
            neg = np.argwhere(lower < 0.0)
            if neg.size == 0:
                lo = np.array(self.ref_dims) // 2
                hi = lo.copy()
            else:
                lo = neg.min(axis=0)
                hi = neg.max(axis=0)
            self._support = (lo, hi)
        return self._support


def lattice_diagonal(dims: Dims) -> float:
    return math.sqrt(dims[0] ** 2 + dims[1] ** 2 + dims[2] ** 2)


def state_transform(model: ShapeModel, state: ShapeState, out_dims: Dims):
    """Affine map q = A v + o from output voxels to model-space sample points.

    Inverts: scale by `a` about the model center, rotate about the output
    center, then translate.
    """
    r_inv = rotation_matrix(*state.rotation).T
    a_mat = r_inv / state.scale
    c_out = (np.array(out_dims, dtype=np.float64) - 1.0) / 2.0
    c_model = (np.array(model.ref_dims, dtype=np.float64) - 1.0) / 2.0
    t = np.array(state.translation, dtype=np.float64)
    offset = c_model - a_mat @ (t + c_out)
    return a_mat, offset


def _combined_field(model: ShapeModel, state: ShapeState) -> np.ndarray:
    out = np.empty(model.ref_dims, dtype=np.float64)
    coeffs = np.asarray(state.coeffs, dtype=np.float64)
    nx, ny, nz = model.ref_dims
    _kernels.combine_modes(model.mu_arr, model.psi_arr, coeffs, 0, nx, 0, ny, 0, nz, out)
    return out


def synthesize_field(model: ShapeModel, state: ShapeState, out_dims: Dims) -> ScalarField3D:
    """Materialize the shape field for `state` on an output lattice.

    Values are distances in output-voxel units (scaled by `state.scale`);
    points that map outside the model lattice get the output lattice diagonal
    as a far-outside background.
    """
    y0 = _combined_field(model, state)
    a_mat, offset = state_transform(model, state, out_dims)
    background = lattice_diagonal(out_dims)
    out = np.empty(tuple(out_dims), dtype=np.float64)
    _kernels.warp_affine(
        y0,
        a_mat[0, 0], a_mat[0, 1], a_mat[0, 2],
        a_mat[1, 0], a_mat[1, 1], a_mat[1, 2],
        a_mat[2, 0], a_mat[2, 1], a_mat[2, 2],
        offset[0], offset[1], offset[2],
        state.scale, background, out,
    )
    return ScalarField3D(tuple(out_dims), out)


def evaluate_at(model: ShapeModel, state: ShapeState, voxel, out_dims: Dims) -> float:
    """Shape-field value at a single output voxel, without a full field."""
    pts = np.array([voxel], dtype=np.float64)
    return float(evaluate_at_many(model, state, pts, out_dims)[0])


def evaluate_at_many(
    model: ShapeModel, state: ShapeState, pts: np.ndarray, out_dims: Dims
) -> np.ndarray:
    a_mat, offset = state_transform(model, state, out_dims)
    background = lattice_diagonal(out_dims)
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
    out = np.empty(pts.shape[0], dtype=np.float64)
    coeffs = np.asarray(state.coeffs, dtype=np.float64)
    _kernels.eval_state_at_points(
        model.mu_arr, model.psi_arr, coeffs,
        a_mat[0, 0], a_mat[0, 1], a_mat[0, 2],
        a_mat[1, 0], a_mat[1, 1], a_mat[1, 2],
        a_mat[2, 0], a_mat[2, 1], a_mat[2, 2],
        offset[0], offset[1], offset[2],
        state.scale, background, pts, out,
    )
    return out


def to_mask(fld: ScalarField3D) -> BinaryMask:
    """Threshold a shape field at zero; strictly negative voxels are inside."""
    return BinaryMask(fld.dims, (fld.data < 0.0).astype(np.uint8), fld.spacing)


def _center_mask(mask: BinaryMask) -> BinaryMask:
    """Shift the foreground so its centroid lands on the volume center
    (nearest voxel); keeps translation out of the eigenmodes."""
    fg = np.argwhere(mask.data > 0)
    centroid = fg.mean(axis=0)
    center = (np.array(mask.dims, dtype=np.float64) - 1.0) / 2.0
    shift = np.rint(center - centroid).astype(int)
    if np.all(shift == 0):
        return mask
    out = np.zeros_like(mask.data)
    src_lo = np.maximum(0, -shift)
    src_hi = np.minimum(mask.dims, np.array(mask.dims) - shift)
    dst_lo = src_lo + shift
    dst_hi = src_hi + shift
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = mask.data[
        src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
    ]
    return BinaryMask(mask.dims, out, mask.spacing)


def train(masks: list[BinaryMask], n: int) -> ShapeModel:
    """Fit the shape prior to training masks.

    Masks are centroid-aligned, converted to signed distance fields, and the
    top-n principal modes of the ensemble are extracted through the m x m
    Gram matrix (m is small, the lattice is not).  Eigenvalues are sample
    variances of the training coefficients along each mode.
    """
    m = len(masks)
    if m < 2:
        raise ValueError(f"need at least 2 training masks, got {m}")
    dims = masks[0].dims
    for msk in masks:
        if msk.dims != dims:
            raise ValueError(f"training mask dims differ: {msk.dims} vs {dims}")
    if not (1 <= n <= m - 1):
        raise ValueError(f"mode count must satisfy 1 <= n <= m-1, got n={n}, m={m}")

    fields = np.stack(
        [signed_distance(_center_mask(msk)).data.ravel() for msk in masks]
    )
    mu = fields.mean(axis=0)
    dev = fields - mu

    gram = dev @ dev.T
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1][:n]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]

    modes = []
    for k in range(n):
        if eigvals[k] > 1e-9:
            mode = (dev.T @ eigvecs[:, k]) / math.sqrt(eigvals[k])
        else:
            mode = np.zeros(dev.shape[1])
        modes.append(ScalarField3D(dims, mode.reshape(dims)))

    lam = eigvals / (m - 1)
    mean_field = SignedDistanceField(dims, mu.reshape(dims), masks[0].spacing)
    return ShapeModel(dims, mean_field, modes, lam, n)


# ---------------------------------------------------------------------------
# Persistence: a directory of metadata JSON plus one .mhd per field
# ---------------------------------------------------------------------------


def save_model(model: ShapeModel, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": model.n,
        "ref_dims": list(model.ref_dims),
        "eigenvalues": [float(v) for v in model.eigenvalues],
        "bound_factor": model.bound_factor,
    }
    (out_dir / "model.json").write_text(json.dumps(meta, indent=2), encoding="ascii")
    save_mhd(model.mean, out_dir / "mean.mhd")
    for i, mode in enumerate(model.modes):
        save_mhd(mode, out_dir / f"mode_{i}.mhd")


def load_model(model_dir: str | Path) -> ShapeModel:
    model_dir = Path(model_dir)
    meta = json.loads((model_dir / "model.json").read_text(encoding="ascii"))
    mean = load_mhd(model_dir / "mean.mhd")
    modes = [load_mhd(model_dir / f"mode_{i}.mhd") for i in range(meta["n"])]
    return ShapeModel(
        ref_dims=tuple(meta["ref_dims"]),
        mean=SignedDistanceField(mean.dims, mean.data, mean.spacing),
        modes=list(modes),
        eigenvalues=np.array(meta["eigenvalues"], dtype=np.float64),
        n=int(meta["n"]),
        bound_factor=float(meta["bound_factor"]),
    )
