"""Neural combinatorial optimization for 2D Euclidean TSP.

One autoregressive policy (graph-transformer or gated-GCN encoder plus an
attention decoder) trained either by imitation of optimal tours or by
REINFORCE, with greedy/sampling/beam inference and exact solvers for labels
and optimality gaps.
"""

from .autodiff import GradientTape, Tensor
from .decoder import DecodeConfig, beam_search, greedy_decode, sample_decode
from .encoders import EncoderConfig
from .model import PolicyModel, parameter_count
from .training import TrainConfig, train
from .tsp import (Dataset, Tour, TspInstance, brute_force_solve, generate_dataset,
                  generate_instance, held_karp_solve, nearest_neighbor, optimality_gap,
                  tour_length, two_opt)

__version__ = "0.1.0"

__all__ = [
    "GradientTape", "Tensor", "DecodeConfig", "beam_search", "greedy_decode",
    "sample_decode", "EncoderConfig", "PolicyModel", "parameter_count",
    "TrainConfig", "train", "Dataset", "Tour", "TspInstance", "brute_force_solve",
    "generate_dataset", "generate_instance", "held_karp_solve", "nearest_neighbor",
    "optimality_gap", "tour_length", "two_opt", "__version__",
]
