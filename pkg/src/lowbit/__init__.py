"""Training binary, ternary and multi-bit networks by combinatorial search
over weight bits: greedy coordinate descent and randomized double greedy on
supermodular losses."""
__version__ = "0.1.0"

from .quantcore import (BinaryWeightVector, MultiComponentWeight, QuantLevels, compose, flip,
                        new_binary, new_multibit, ternary)
from .dataio import BinaryTask, Dataset, make_binary_task, subsample
from .oracle import (LinearOracle, NeuronOracle, check_submodular, check_supermodular,
                     logistic_loss)
from .netmodel import NetworkModel, build_model, forward, linearize
from .optim import (OptimizerConfig, TrainReport, gcd, multibit_cd, multilayer_train, rsm, sag,
                    two_layer_train)

__all__ = [
    "BinaryWeightVector", "MultiComponentWeight", "QuantLevels", "compose", "flip", "new_binary",
    "new_multibit", "ternary", "BinaryTask", "Dataset", "make_binary_task", "subsample",
    "LinearOracle", "NeuronOracle", "check_submodular", "check_supermodular", "logistic_loss",
    "NetworkModel", "build_model", "forward", "linearize", "OptimizerConfig", "TrainReport",
    "gcd", "multibit_cd", "multilayer_train", "rsm", "sag", "two_layer_train",
]
