"""Randomized blob phantoms: ground-truth masks plus intensity volumes.

Each phantom is a rotated ellipsoid whose boundary radius is perturbed by a
smooth random field, centered near the volume middle.  Families drawn from
the same configuration are similar enough for a low-rank shape prior to
capture them, which is what the simulated sessions need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .shapemodel import rotation_matrix
from .volume import BinaryMask, ScalarField3D, gaussian_blur


@dataclass(frozen=True)
class PhantomConfig:
    rel_radius: tuple[float, float] = (0.16, 0.24)  # semi-axes / axis length
    center_jitter: float = 0.06  # of axis length
    bump_amplitude: float = 0.05  # of unit radius
    bump_sigma: float = 6.0  # voxels
    max_tilt: float = 0.5  # radians, per angle
    fg_fraction: tuple[float, float] = (0.005, 0.4)
    fg_intensity: float = 0.7
    bg_intensity: float = 0.25
    noise_sigma: float = 0.05


def make_phantom(
    dims, rng: np.random.Generator, cfg: PhantomConfig = PhantomConfig()
) -> tuple[BinaryMask, ScalarField3D]:
    """One mask/volume pair; retries jittered draws until the foreground
    fraction lands inside the configured bounds."""
    dims = tuple(int(d) for d in dims)
    span = np.array(dims, dtype=np.float64)
    grid = np.stack(
        np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"),
        axis=-1,
    )

    for _ in range(50):
        radii = span * rng.uniform(*cfg.rel_radius, size=3)
        center = (span - 1) / 2 + span * rng.uniform(
            -cfg.center_jitter, cfg.center_jitter, size=3
        )
        angles = rng.uniform(-cfg.max_tilt, cfg.max_tilt, size=3)
        rot = rotation_matrix(*angles)

        local = (grid - center) @ rot  # rotate into ellipsoid frame
        radial = np.sqrt(((local / radii) ** 2).sum(axis=-1))

        noise = ScalarField3D(dims, rng.standard_normal(dims))
        bump = gaussian_blur(noise, cfg.bump_sigma).data
        std = bump.std()
        if std > 0:
            bump = bump / std * cfg.bump_amplitude

        mask_data = (radial <= 1.0 + bump).astype(np.uint8)
        frac = mask_data.mean()
        if cfg.fg_fraction[0] <= frac <= cfg.fg_fraction[1] and mask_data.min() == 0:
            break
    else:
        raise RuntimeError("could not draw a phantom within the foreground bounds")

    mask = BinaryMask(dims, mask_data)
    intensity = cfg.bg_intensity + (cfg.fg_intensity - cfg.bg_intensity) * mask_data
    smooth = gaussian_blur(ScalarField3D(dims, intensity.astype(np.float64)), 1.0).data
    smooth = smooth + cfg.noise_sigma * rng.standard_normal(dims)
    return mask, ScalarField3D(dims, smooth)


def make_family(
    dims, count: int, seed: int, cfg: PhantomConfig = PhantomConfig()
) -> list[tuple[BinaryMask, ScalarField3D]]:
    """`count` independent phantoms from one master seed (reproducible)."""
    master = np.random.SeedSequence(seed)
    return [
        make_phantom(dims, np.random.default_rng(child), cfg)
        for child in master.spawn(count)
    ]
