"""Random-cluster model laboratory: samplers, events, estimators and renormalization."""

__version__ = "0.1.0"

from ._accel import backend
from .lattice import Region, build_block, build_box, build_rectangle, build_slab
from .rcmodel import BondConfig, BoundaryCondition, RCParams, read_snapshot, write_snapshot
from .rng import RNGStream
from .sampler import ChainState, SamplerConfig, enumerate_exact, sample_chain
from .stats import Estimate

__all__ = [
    "__version__", "backend", "Region", "build_block", "build_box", "build_rectangle",
    "build_slab", "BondConfig", "BoundaryCondition", "RCParams", "read_snapshot",
    "write_snapshot", "RNGStream", "ChainState", "SamplerConfig", "enumerate_exact",
    "sample_chain", "Estimate",
]
