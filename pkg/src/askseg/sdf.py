"""Exact Euclidean signed distance transform of binary masks.

Sign convention: inside is negative.  A voxel's magnitude is its exact
Euclidean distance (in voxels) to the nearest voxel of the opposite set, so
zero never occurs and thresholding at 0 recovers the input mask.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, ScalarField3D


class SignedDistanceField(ScalarField3D):
    """ScalarField3D whose values are signed voxel distances to the opposite
    set: negative inside the mask, positive outside."""


def signed_distance(mask: BinaryMask) -> SignedDistanceField:
    """Exact signed Euclidean distance field of a mask.

    Inside voxels get minus the distance to the nearest background voxel,
    outside voxels plus the distance to the nearest foreground voxel.
    Rejects all-ones / all-zeros masks, whose field would be infinite.
    """
    fg = mask.data.astype(bool)
    n_fg = int(fg.sum())
    if n_fg == 0 or n_fg == mask.n_voxels:
        raise ValueError("degenerate mask: needs at least one inside and one outside voxel")
    dist_in = ndimage.distance_transform_edt(fg)
    dist_out = ndimage.distance_transform_edt(~fg)
    return SignedDistanceField(mask.dims, dist_out - dist_in, mask.spacing)
