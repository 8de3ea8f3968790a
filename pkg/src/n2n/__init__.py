"""Net2Net: function-preserving widening and deepening of small networks."""
from .baselines import random_init_baseline, random_pad_baseline
from .estimators import Net2DeeperNet, Net2WiderNet, NetClassifier, Network
from .modelio import load, save
from .net2net import (DeepenError, InconsistentPlanError, NoiseConfig, RemapPlan, UnsupportedActivationError,
                      WidenError, deepen, infer_remaps, widen, widen_then_deepen)
from .netgraph import Graph, GraphError, backward, forward, infer_shapes, init_params, topological_order
from .train import TrainConfig, TrainingAborted, student_config, train
from .verify import StructureError, alg1_reference, check_preserved, grad_check

__version__ = "0.1.0"

__all__ = [
    "DeepenError", "Graph", "GraphError", "InconsistentPlanError", "Net2DeeperNet", "Net2WiderNet",
    "NetClassifier", "Network", "NoiseConfig", "RemapPlan", "StructureError", "TrainConfig",
    "TrainingAborted", "UnsupportedActivationError", "WidenError", "alg1_reference", "backward",
    "check_preserved", "deepen", "forward", "grad_check", "infer_remaps", "infer_shapes", "init_params",
    "load", "random_init_baseline", "random_pad_baseline", "save", "student_config", "topological_order",
    "train", "widen", "widen_then_deepen",
]
