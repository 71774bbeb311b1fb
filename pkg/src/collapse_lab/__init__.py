"""Embedding-collapse analysis for multi-field recommendation models.

Numpy-only SVD and spectral metrics, a small reverse-mode engine, six
feature-interaction modules with multi-embedding variants, synthetic data,
a deterministic training harness and a ``collapse-lab`` command line.
"""
from .errors import (CollapseLabError, ConfigError, ContractError, DataError,
                     DegenerateInputError, InsufficientDataError, MetricError, NumericalError,
                     ShapeError, StateError, TrainingAborted)
from .linalg import principal_angle_cosines, singular_values, svd
from .metrics import (diversity, diversity_matrix, gradient_spectral_decomposition,
                      ia_grid_summaries, information_abundance, normalized_ia,
                      sub_embedding_ia_grid)
from .models import FieldSchema, Model, ModelSpec
from .data import Dataset, SplitSpec, gen_toy, gen_two_pattern, load_csv, split
from .train import RunRecord, TrainConfig, auc, run_toy, train

__version__ = "0.1.0"
