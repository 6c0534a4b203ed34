from .core import (DimensionError, Graph, GraphStateError, NonFiniteError, Tensor, backward,
                   current_graph, debug_mode, default_dtype, no_grad, parameter, precision)
from .ops import (ConfigurationError, RunningStats, activation, add, avgpool_global, batchnorm2d,
                  concat, conv2d, conv_output_size, getitem, linear, mean_all, mul, relu, repeat_rows,
                  reshape, rsub, sigmoid, softmax, softmax_cross_entropy, sub, sum_all, tanh)
from .optim import Adam, AdamState, adam_step
from .gradcheck import check_gradients, relative_error
from .checkpoint import CheckpointFormatError, load_blocks, save_blocks

__all__ = [name for name in dir() if not name.startswith("_")]
