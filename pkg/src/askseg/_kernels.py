"""Compiled inner loops shared by field synthesis and chain scoring.

Every path that decides a voxel's inside/outside status funnels through the
same trilinear expression (`_trilerp`), so the fused statistics kernel, the
full-field warp, and single-point evaluation produce bit-identical values for
identical inputs.  Parallel kernels accumulate per-row partials that callers
reduce in a fixed order, keeping results independent of thread scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _trilerp(vol, px, py, pz):
    # caller guarantees 0 <= p <= dim-1 per axis
    nx, ny, nz = vol.shape
    ix0 = int(px)
    iy0 = int(py)
    iz0 = int(pz)
    fx = px - ix0
    fy = py - iy0
    fz = pz - iz0
    ix1 = ix0 + 1 if ix0 + 1 < nx else nx - 1
    iy1 = iy0 + 1 if iy0 + 1 < ny else ny - 1
    iz1 = iz0 + 1 if iz0 + 1 < nz else nz - 1
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    return (
        vol[ix0, iy0, iz0] * gx * gy * gz
        + vol[ix1, iy0, iz0] * fx * gy * gz
        + vol[ix0, iy1, iz0] * gx * fy * gz
        + vol[ix1, iy1, iz0] * fx * fy * gz
        + vol[ix0, iy0, iz1] * gx * gy * fz
        + vol[ix1, iy0, iz1] * fx * gy * fz
        + vol[ix0, iy1, iz1] * gx * fy * fz
        + vol[ix1, iy1, iz1] * fx * fy * fz
    )


@njit(cache=True)
def sample_point(vol, px, py, pz, background):
    nx, ny, nz = vol.shape
    if (
        px < 0.0
        or py < 0.0
        or pz < 0.0
        or px > nx - 1.0
        or py > ny - 1.0
        or pz > nz - 1.0
    ):
        return background
    return _trilerp(vol, px, py, pz)


@njit(cache=True, parallel=True)
def combine_modes(mu, psis, coeffs, x0, x1, y0, y1, z0, z1, out):
    """out[region] = mu + sum_i coeffs[i] * psis[i] over an index box."""
    nb = coeffs.shape[0]
    for ix in prange(x0, x1):
        for iy in range(y0, y1):
            for iz in range(z0, z1):
                acc = mu[ix, iy, iz]
                for i in range(nb):
                    acc += coeffs[i] * psis[i, ix, iy, iz]
                out[ix, iy, iz] = acc


@njit(cache=True, parallel=True)
def warp_affine(src, a00, a01, a02, a10, a11, a12, a20, a21, a22, o0, o1, o2, scale, background, out):
    """Resample src through q = A v + o into out, scaling values by `scale`.

    Out-of-support points receive `background` unscaled.
    """
    nx, ny, nz = out.shape
    sx, sy, sz = src.shape
    for ix in prange(nx):
        for iy in range(ny):
            for iz in range(nz):
                qx = a00 * ix + a01 * iy + a02 * iz + o0
                qy = a10 * ix + a11 * iy + a12 * iz + o1
                qz = a20 * ix + a21 * iy + a22 * iz + o2
                if (
                    qx < 0.0
                    or qy < 0.0
                    or qz < 0.0
                    or qx > sx - 1.0
                    or qy > sy - 1.0
                    or qz > sz - 1.0
                ):
                    out[ix, iy, iz] = background
                else:
                    out[ix, iy, iz] = scale * _trilerp(src, qx, qy, qz)


@njit(cache=True)
def eval_state_at_points(
    mu, psis, coeffs,
    a00, a01, a02, a10, a11, a12, a20, a21, a22, o0, o1, o2,
    scale, background, pts, out,
):
    """Shape-field values at individual voxels without materializing a field.

    Combines the mode corners into a 2x2x2 scratch cube and interpolates it
    with the shared `_trilerp`, so results match the combined-field warp
    bit for bit.
    """
    nx, ny, nz = mu.shape
    nb = coeffs.shape[0]
    cube = np.empty((2, 2, 2), dtype=np.float64)
    for j in range(pts.shape[0]):
        vx = pts[j, 0]
        vy = pts[j, 1]
        vz = pts[j, 2]
        qx = a00 * vx + a01 * vy + a02 * vz + o0
        qy = a10 * vx + a11 * vy + a12 * vz + o1
        qz = a20 * vx + a21 * vy + a22 * vz + o2
        if (
            qx < 0.0
            or qy < 0.0
            or qz < 0.0
            or qx > nx - 1.0
            or qy > ny - 1.0
            or qz > nz - 1.0
        ):
            out[j] = background
            continue
        ix0 = int(qx)
        iy0 = int(qy)
        iz0 = int(qz)
        ix1 = ix0 + 1 if ix0 + 1 < nx else nx - 1
        iy1 = iy0 + 1 if iy0 + 1 < ny else ny - 1
        iz1 = iz0 + 1 if iz0 + 1 < nz else nz - 1
        for cx in range(2):
            gx = ix0 if cx == 0 else ix1
            for cy in range(2):
                gy = iy0 if cy == 0 else iy1
                for cz in range(2):
                    gz = iz0 if cz == 0 else iz1
                    acc = mu[gx, gy, gz]
                    for i in range(nb):
                        acc += coeffs[i] * psis[i, gx, gy, gz]
                    cube[cx, cy, cz] = acc
        out[j] = scale * _trilerp(cube, qx - ix0, qy - iy0, qz - iz0)


@njit(cache=True, parallel=True)
def negative_bbox_rows(y0, x0, x1, y0_, y1_, z0, z1, row_any, row_ylo, row_yhi, row_zlo, row_zhi):
    """Per-x-row extent of the negative region inside an index box."""
    for ix in prange(x0, x1):
        any_neg = False
        ylo = y1_
        yhi = y0_ - 1
        zlo = z1
        zhi = z0 - 1
        for iy in range(y0_, y1_):
            for iz in range(z0, z1):
                if y0[ix, iy, iz] < 0.0:
                    any_neg = True
                    if iy < ylo:
                        ylo = iy
                    if iy > yhi:
                        yhi = iy
                    if iz < zlo:
                        zlo = iz
                    if iz > zhi:
                        zhi = iz
        r = ix - x0
        row_any[r] = any_neg
        row_ylo[r] = ylo
        row_yhi[r] = yhi
        row_zlo[r] = zlo
        row_zhi[r] = zhi


@njit(cache=True, parallel=True)
def masked_weight_stats(
    y0,
    a00, a01, a02, a10, a11, a12, a20, a21, a22, o0, o1, o2,
    weights,
    bx0, bx1, by0, by1, bz0, bz1,
    tx0, tx1, ty0, ty1, tz0, tz1,
    partial_w, partial_n,
):
    """Sum `weights` over output voxels whose warped shape value is negative.

    (tx0..tz1) bounds the model-space region where negative values can occur;
    anything warping outside it counts as background, so y0 only has to be
    valid there.  Row partials keep the reduction order deterministic.
    """
    mx, my, mz = y0.shape
    for ix in prange(bx0, bx1):
        acc_w = 0.0
        acc_n = 0
        for iy in range(by0, by1):
            for iz in range(bz0, bz1):
                qx = a00 * ix + a01 * iy + a02 * iz + o0
                qy = a10 * ix + a11 * iy + a12 * iz + o1
                qz = a20 * ix + a21 * iy + a22 * iz + o2
                if qx < 0.0 or qy < 0.0 or qz < 0.0:
                    continue
                if qx > mx - 1.0 or qy > my - 1.0 or qz > mz - 1.0:
                    continue
                if qx < tx0 or qx > tx1 or qy < ty0 or qy > ty1 or qz < tz0 or qz > tz1:
                    continue
                val = _trilerp(y0, qx, qy, qz)
                if val < 0.0:
                    acc_w += weights[ix, iy, iz]
                    acc_n += 1
        partial_w[ix - bx0] = acc_w
        partial_n[ix - bx0] = acc_n


@njit(cache=True, parallel=True)
def masked_fill(
    y0,
    a00, a01, a02, a10, a11, a12, a20, a21, a22, o0, o1, o2,
    bx0, bx1, by0, by1, bz0, bz1,
    tx0, tx1, ty0, ty1, tz0, tz1,
    out,
):
    """Write the thresholded segmentation (1 where shape value < 0) into out."""
    mx, my, mz = y0.shape
    for ix in prange(bx0, bx1):
        for iy in range(by0, by1):
            for iz in range(bz0, bz1):
                qx = a00 * ix + a01 * iy + a02 * iz + o0
                qy = a10 * ix + a11 * iy + a12 * iz + o1
                qz = a20 * ix + a21 * iy + a22 * iz + o2
                if qx < 0.0 or qy < 0.0 or qz < 0.0:
                    continue
                if qx > mx - 1.0 or qy > my - 1.0 or qz > mz - 1.0:
                    continue
                if qx < tx0 or qx > tx1 or qy < ty0 or qy > ty1 or qz < tz0 or qz > tz1:
                    continue
                val = _trilerp(y0, qx, qy, qz)
                if val < 0.0:
                    out[ix, iy, iz] = 1
