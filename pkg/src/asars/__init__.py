"""Session-aware recurrent recommendation with dwell-time attention and user profiles."""

from .autodiff import Graph, Tensor, grad_check, precision
from .dataprep import Corpus, Event, Session, prepare
from .evaluate import evaluate, mrr_at_k, popularity_baseline, recall_at_k
from .model import ASARSModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, build_model, fit, grid_search

__version__ = "0.1.0"
