from .autograd import Value, backward, concat, gelu, layer_norm, matmul, max_pool_grid, precision, softmax
from .checkpoint import load_checkpoint, save_checkpoint
from .model import (DEFAULT_FROZEN, DualBranchRegressor, ModelConfig, Parameter, set_frozen)

__all__ = [
    "Value", "backward", "concat", "gelu", "layer_norm", "matmul", "max_pool_grid", "precision",
    "softmax", "load_checkpoint", "save_checkpoint", "DEFAULT_FROZEN", "DualBranchRegressor",
    "ModelConfig", "Parameter", "set_frozen",
]
