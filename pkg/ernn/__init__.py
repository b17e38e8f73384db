"""Block-sparse, quantized recurrent-network inference for RNN-T speech models."""

from . import quant  # noqa: F401  registers the hybrid and integer cell steps
from .rnnt import QuantMode, RnntModel, convert_to_hybrid, convert_to_integer, init_random_model, rnnt_greedy_decode
from .topology import TopologyConfig, count_params, load_topology, preset

__version__ = "0.1.0"

__all__ = [
    "QuantMode",
    "RnntModel",
    "TopologyConfig",
    "convert_to_hybrid",
    "convert_to_integer",
    "count_params",
    "init_random_model",
    "load_topology",
    "preset",
    "rnnt_greedy_decode",
]
