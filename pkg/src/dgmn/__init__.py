"""Dynamic sampled graph message passing layer, from first principles.

A feature map is treated as a graph of per-pixel nodes. Each node gathers
messages from a small, input-conditioned set of neighbors: multi-rate dilated
tap grids, optionally displaced by learned fractional walks, weighted by
predicted per-position grouped filters and softmax-normalized affinities.
All forward and backward passes are hand-derived and validated against
brute-force oracles and central finite differences.
"""

from .errors import ConfigError, DivergenceError, FormatError, UsageError
from .tensor import (Conv2dParams, conv2d, conv2d_backward, init_conv, relu,
                     rng_fill, softmax_lastk, tensor_read, tensor_write)
from .sampler import RateGrid, base_grid, bilinear_gather, predict_walks, sample_field
from .dynamics import DynamicField, normalize_affinity, predict_dynamic
from .layer import (DgmnConfig, DgmnParams, combine_update, dgmn_backward,
                    dgmn_forward, dmc, init_params, load_params, named_params,
                    num_scalars, randomize_params, save_params)
from .oracles import (GradCheckReport, conv2d_naive, finite_diff_grad,
                      init_nonlocal, naive_dmc, nonlocal_forward)
from .analysis import count_flops, count_params, nonlocal_cost, scaling_report
from .toytask import (ContextSample, TrainConfig, evaluate, make_context_dataset,
                      train_loop)

__version__ = "0.1.0"
