# CFN-Indel core
# Model trees, the indel simulator, block signatures, distance estimators and
# level-by-level tree reconstruction.

from .errors import IndelPhyError, ReconstructionStall
from .tree_model import EdgeParams, ModelTree, balanced, balanced_jitter
from .indel_sim import Bitstring, RngStream, SequenceAssignment, evolve_tree
from .signatures import BlockScheme, SignatureVector, block_scheme
from .estimators import KnownDistances, OracleDistances, SignatureDistances
from .reconstruction import ReconstructedTree, ReconstructionSettings, rf_distance, tree_reconstruct
from .run_logger import RunEvent, RunLogger

__all__ = [
    "IndelPhyError",
    "ReconstructionStall",
    "EdgeParams",
    "ModelTree",
    "balanced",
    "balanced_jitter",
    "Bitstring",
    "RngStream",
    "SequenceAssignment",
    "evolve_tree",
    "BlockScheme",
    "SignatureVector",
    "block_scheme",
    "KnownDistances",
    "OracleDistances",
    "SignatureDistances",
    "ReconstructedTree",
    "ReconstructionSettings",
    "rf_distance",
    "tree_reconstruct",
    "RunEvent",
    "RunLogger",
]
