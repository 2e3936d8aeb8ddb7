"""Sparsify, adapter-tune, and search: a desk-scale pipeline over a toy transformer."""

from .adapters import (
    SubAdapterConfig,
    SuperAdapter,
    attach,
    delta,
    maximal_config,
    merge,
    minimal_config,
)
from .data import Dataset, TaskKind, TaskSpec, generate
from .errors import ArtifactError, ConfigError, NumericError, ShearsError
from .linalg import CsrMatrix, Rng, column_l2_norms, csr_from_dense, csr_matmul, matmul
from .metrics import BenchReport, ParamReport, bench_inference, count_params
from .model import (
    Batch,
    Model,
    ModelConfig,
    adapter_gradients,
    capture_activations,
    forward,
    freeze_model,
    init_model,
    loss,
    weights_hash,
)
from .nls import TrainConfig, TrainLog, TrainMode, evaluate, sample_config, train
from .pruning import PruneMethod, PruneReport, prune_rows, sparsify_model, wanda_scores
from .search import (
    Candidate,
    EvalCache,
    SearchSpace,
    evolutionary_search,
    heuristic_config,
    hill_climb,
    neighbors,
    nondominated_sort,
)

__version__ = "0.1.0"
