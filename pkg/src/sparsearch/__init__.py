"""sparsearch: architecture search by direct sparse optimization.

Train one completely-connected DAG network whose edges carry scaling factors
under L1 sparsity, optimize the factors with a proximal-gradient momentum
method that produces exact zeros, then prune zero edges and dead operations.
"""

__version__ = "0.1.0"

from .graph import ArchitectureDescriptor, BlockGraph, NetworkConfig, edge_count
from .network import Network, build_from_descriptor
from .optim import ApgNag, Nag, apg_nag_update, soft_threshold
from .tensor import Tape, Tensor, finite_diff_check

__all__ = [
    "ArchitectureDescriptor", "BlockGraph", "NetworkConfig", "edge_count",
    "Network", "build_from_descriptor",
    "ApgNag", "Nag", "apg_nag_update", "soft_threshold",
    "Tape", "Tensor", "finite_diff_check",
]
