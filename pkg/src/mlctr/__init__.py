"""Coupled sparse tensor completion with residual matrix-factorization embeddings."""

__version__ = "0.1.0"

from .embedding import Activation, EmbeddingNetwork, backward_row, forward_row, init_network
from .errors import (BoundsError, ConfigError, DataError, DivergenceError, DuplicateError,
                     MLCTRError, ParseError, SplitError)
from .models import (CoupledModel, ModelSpec, Samples, SingleModel, build_coupled, build_single,
                     grad_step, load_checkpoint, loss_batch, make_cp_baseline, predict,
                     save_checkpoint)
from .sparse import SparseTensor3, SplitSpec, Standardizer, load_coo, save_coo, sparsity, split, standardize
from .training import MetricsReport, TrainConfig, compute_metrics, evaluate, impute, train
