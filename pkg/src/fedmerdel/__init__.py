"""Variational categorical mixture clustering with merge/delete moves and one-shot federated merging."""
from .data import CategoricalDataset, read_csv, write_csv
from .kernels import BACKEND as KERNEL_BACKEND
from .model import Priors, SufficientStats, VariationalState

__version__ = "0.1.0"
