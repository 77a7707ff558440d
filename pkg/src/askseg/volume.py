"""Volumetric lattice containers, MetaImage I/O, and the overlap metric.

Fields live on a lattice of ``dims = (nx, ny, nz)`` voxels and are stored as
C-contiguous float64/uint8 arrays indexed ``data[x, y, z]``.  The on-disk raw
layout is x-fastest, which corresponds to Fortran-order flattening of that
array.  All engine math is in voxel units; ``spacing`` is carried through but
never enters any formula.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels

Dims = tuple[int, int, int]

#: MetaImage header keys this reader interprets.  Anything else is skipped.
_HONORED_KEYS = {
    "NDims",
    "DimSize",
    "ElementType",
    "ElementSpacing",
    "ElementByteOrderMSB",
    "ElementDataFile",
}


@dataclass
class ScalarField3D:
    """One real value per voxel of a 3D lattice.

    Parameters
    ----------
    dims : (nx, ny, nz) voxel counts, each >= 1.
    data : float64 array of shape ``dims``, indexed ``[x, y, z]``.
    spacing : voxel spacing in mm, informational only.
    meta : free-form provenance (translation offsets, source paths, ...).
    """

    dims: Dims
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.shape != self.dims:
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.dims}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field contains non-finite values")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]


@dataclass
class BinaryMask:
    """A 0/1 segmentation on a 3D lattice, indexed like ScalarField3D."""

    dims: Dims
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.shape != self.dims:
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.dims}")
        if self.data.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def n_foreground(self) -> int:
        return int(self.data.sum())


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice similarity coefficient 2|A∩B| / (|A| + |B|).

    Two empty masks agree on "no object" and score 1.0.
    """
    if a.dims != b.dims:
        raise ValueError(f"mask dims differ: {a.dims} vs {b.dims}")
    na = int(a.data.sum())
    nb = int(b.data.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.data & b.data))
    return 2.0 * inter / (na + nb)


def gaussian_blur(fld: ScalarField3D, sigma: float) -> ScalarField3D:
    """Separable Gaussian smoothing with clamp-to-edge borders.

    The kernel is the normalized sampled Gaussian with radius ceil(3*sigma)
    per axis; edge handling replicates the border voxel, so interior-supported
    mass is preserved.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    out = ndimage.gaussian_filter(fld.data, sigma=sigma, mode="nearest", radius=radius)
    return ScalarField3D(fld.dims, out, fld.spacing)


def trilinear_sample(fld: ScalarField3D, p, background: float = 0.0) -> float:
    """Trilinear interpolation at a continuous point in voxel coordinates.

    Points inside ``[0, nx-1] x [0, ny-1] x [0, nz-1]`` interpolate the eight
    surrounding voxels (exact at lattice nodes); points outside return
    ``background``.
    """
    px, py, pz = float(p[0]), float(p[1]), float(p[2])
    return float(_kernels.sample_point(fld.data, px, py, pz, float(background)))


# ---------------------------------------------------------------------------
# MetaImage (.mhd + .raw) subset: MET_UCHAR masks and MET_FLOAT scalar fields
# ---------------------------------------------------------------------------


def _parse_header(path: Path) -> dict[str, str]:
    header: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed MetaImage header line: {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            header[key] = value
            if key not in _HONORED_KEYS:
                warnings.warn(f"ignoring MetaImage header key {key!r}", stacklevel=3)
    return header


def load_mhd(path: str | Path) -> ScalarField3D | BinaryMask:
    """Read a MetaImage header + raw payload pair.

    MET_FLOAT payloads become ScalarField3D, MET_UCHAR payloads become
    BinaryMask (values must be 0/1).  Byte order follows the
    ElementByteOrderMSB flag.
    """
    path = Path(path)
    header = _parse_header(path)

    ndims = int(header.get("NDims", "0"))
    if ndims != 3:
        raise ValueError(f"unsupported dimensionality NDims={ndims}")
    dims = tuple(int(t) for t in header["DimSize"].split())
    if len(dims) != 3:
        raise ValueError(f"DimSize must have three entries, got {header['DimSize']!r}")
    spacing = tuple(float(t) for t in header.get("ElementSpacing", "1 1 1").split())
    msb = header.get("ElementByteOrderMSB", "False").lower() == "true"

    elem = header.get("ElementType", "")
    if elem == "MET_FLOAT":
        dtype = np.dtype(">f4" if msb else "<f4")
    elif elem == "MET_UCHAR":
        dtype = np.dtype(np.uint8)
    else:
        raise ValueError(f"unsupported ElementType {elem!r}")

    datafile = header.get("ElementDataFile", "")
    if not datafile or datafile.upper() == "LOCAL":
        raise ValueError("ElementDataFile must reference an external raw file")
    raw_path = path.parent / datafile
    if not raw_path.exists():
        raise FileNotFoundError(f"raw payload not found: {raw_path}")

    payload = np.fromfile(raw_path, dtype=dtype)
    n = dims[0] * dims[1] * dims[2]
    if payload.size != n:
        raise ValueError(
            f"payload has {payload.size} elements but header promises {n} ({dims})"
        )
    data = payload.reshape(dims, order="F")

    if elem == "MET_UCHAR":
        return BinaryMask(dims, data, spacing, meta={"path": str(path)})
    return ScalarField3D(dims, data.astype(np.float64), spacing, meta={"path": str(path)})


def save_mhd(fld: ScalarField3D | BinaryMask, path: str | Path) -> None:
    """Write a field as a .mhd header plus a sibling .raw payload.

    ScalarField3D is stored as little-endian MET_FLOAT (float32), BinaryMask
    as MET_UCHAR.  ``load_mhd`` round-trips both bit-exactly.
    """
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    raw_name = path.with_suffix(".raw").name

    if isinstance(fld, BinaryMask):
        elem = "MET_UCHAR"
        payload = fld.data.astype(np.uint8)
    else:
        elem = "MET_FLOAT"
        payload = fld.data.astype("<f4")

    header = "\n".join(
        [
            "NDims = 3",
            f"DimSize = {fld.dims[0]} {fld.dims[1]} {fld.dims[2]}",
            f"ElementType = {elem}",
            f"ElementSpacing = {fld.spacing[0]} {fld.spacing[1]} {fld.spacing[2]}",
            "ElementByteOrderMSB = False",
            f"ElementDataFile = {raw_name}",
        ]
    )
    path.write_text(header + "\n", encoding="ascii")
    with open(path.parent / raw_name, "wb") as fh:
        fh.write(payload.tobytes(order="F"))
