"""Interactive 3D segmentation driven by yes/no voxel questions."""

from .posterior import BetaConfig, Seed
from .sampler import SamplerConfig, SampleSet
from .session import Session, run_simulation
from .shapemodel import ShapeModel, ShapeState
from .volume import BinaryMask, ScalarField3D, dice, load_mhd, save_mhd

__all__ = [
    "BetaConfig",
    "BinaryMask",
    "SamplerConfig",
    "SampleSet",
    "ScalarField3D",
    "Seed",
    "Session",
    "ShapeModel",
    "ShapeState",
    "dice",
    "load_mhd",
    "save_mhd",
    "run_simulation",
]
