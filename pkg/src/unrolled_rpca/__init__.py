"""Low-rank + sparse video decomposition with classic ISTA and an unrolled,
learned network (pooling front end, learned proximal updates, ConvLSTM
super-resolution tail), plus a synthetic angiography-like data generator."""

from .ista import DecompResult, DivergenceError, IstaConfig, ista_solve
from .network import NetworkConfig, NetworkParams, decompose, forward, layer_forward, load_network, save_network
from .patches import PatchGrid, extract, splice
from .synth import LabeledSequence, SceneSpec, generate, make_dataset
from .tensor import ContractViolation, NonFiniteError, Tensor, no_grad
from .train import TrainConfig, adam_step, loss, train

__all__ = [
    "ContractViolation",
    "DecompResult",
    "DivergenceError",
    "IstaConfig",
    "LabeledSequence",
    "NetworkConfig",
    "NetworkParams",
    "NonFiniteError",
    "PatchGrid",
    "SceneSpec",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "decompose",
    "extract",
    "forward",
    "generate",
    "ista_solve",
    "layer_forward",
    "load_network",
    "loss",
    "make_dataset",
    "no_grad",
    "save_network",
    "splice",
    "train",
]
