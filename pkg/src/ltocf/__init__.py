"""Collaborative filtering with ODE-propagated embeddings and trainable read-out times."""

from .graph import InteractionDataset, InteractionGraph, OperatorKind, build_graph, load_dataset, spmm
from .model import EmbeddingState, ModelParams, TimeGrid, init_embeddings, layer_combination, lightgcn_forward
from .solvers import SolverConfig, SolverKind, integrate_grid, integrate_segment
from .training import TrainConfig, backward, bpr_loss, train
from .evaluation import EvalReport, evaluate

__version__ = "0.1.0"
