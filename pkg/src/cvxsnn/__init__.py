"""Convex training of leaky integrate-and-fire spiking networks.

Hidden layers are frozen into a finite dictionary of binary spike patterns,
the output layer is fitted by a group-lasso program with a certified duality
gap, and the solution is read back as a parallel spiking network.
"""

from .dictionary import (
    LifGrid,
    SpikeDictionary,
    TrajectoryDictionary,
    build_sampled_dictionary,
    build_trajectory_dictionary,
    exact_enumerate_snn_dictionary,
)
from .lif import LifLayerParams, LifWitness, lif_rescale, lif_rollout
from .losses import LossBlock, LossSpec
from .pathnorm import lif_normalize, normalize_incoming, path_regularizer
from .reconstruct import ParallelSnn, reconstruct, verify_reconstruction
from .solver import ConvexProblem, ConvexSolution, dual_certificate, solve
from .surrogate import SurrogateConfig, TrainableSnn, train_sg
from .witness import LifArch, WitnessStore, sample_gaussian_witnesses

__version__ = "0.1.0"

__all__ = [
    "ConvexProblem", "ConvexSolution", "LifArch", "LifGrid", "LifLayerParams", "LifWitness", "LossBlock",
    "LossSpec", "ParallelSnn", "SpikeDictionary", "SurrogateConfig", "TrainableSnn", "TrajectoryDictionary",
    "WitnessStore", "build_sampled_dictionary", "build_trajectory_dictionary", "dual_certificate",
    "exact_enumerate_snn_dictionary", "lif_normalize", "lif_rescale", "lif_rollout", "normalize_incoming",
    "path_regularizer", "reconstruct", "sample_gaussian_witnesses", "solve", "train_sg", "verify_reconstruction",
]
