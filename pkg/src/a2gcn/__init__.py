"""Attribute-aware attentive graph convolution for top-n recommendation."""

from .checkpoint import Checkpoint
from .data import (AttributeTable, DataError, InteractionTable, PreparedData, Split, group_users_by_sparsity,
                   kcore_filter, load_attributes, load_interactions, load_prepared, remove_attributes, split,
                   write_prepared)
from .evaluation import MetricReport, evaluate, hr_at_n, ndcg_at_n, rank_items
from .graph import TripartiteGraph, assemble_laplacian, build_graph
from .model import VARIANTS, forward, init_params, predict, propagate, propagate_matrix, variant_by_name
from .training import TrainConfig, fit

__version__ = "0.1.0"
