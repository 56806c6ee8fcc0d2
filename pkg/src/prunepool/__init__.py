"""prunepool: budgeted channel pruning with a jointly trained pool of
sub-networks sharing one set of weights.

The package is organized bottom-up: `ops` (deterministic numpy layers and
losses with analytic gradients), `optim` (SGD), `gradcheck` (finite
difference oracle), `graph` (architecture specs, the shared weight store,
masked sub-network views), `flops` (cost model and budget solver), `search`
(sparsity training and mask freezing into a pruned-network pool), `train`
(sandwich-rule joint training with distillation chains, calibration,
evaluation), `data` (CIFAR-10 records and the seeded synthetic benchmark),
`checkpoint` (binary+manifest persistence, structure export), and
`pipeline`/`cli` (staged orchestration).
"""

from .errors import (CalibrationMissing, FormatError, InfeasibleBudget,
                     NonFiniteError, PrunePoolError, ShapeMismatch, SpecError)
from .flops import (DeviceBudget, BudgetSolution, FlopsReport, network_flops,
                    solve_budgets, solve_pruning_rate)
from .graph import (ArchSpec, BNStats, ChannelMask, LayerSpec,
                    SharedWeightStore, build_network, subnetwork_view)
from .search import (PNPEntry, PrunedNetworkPool, SearchConfig, extract_mask,
                     mask_similarity, run_search, sparsity_penalty)
from .train import (EvalResult, IterationPlan, LossTerms, TrainConfig,
                    calibrate_bn, calibrate_pool, evaluate, evaluate_pool,
                    sample_iteration_plan, train_joint, training_step)
from .data import (Dataset, iterate_batches, load_cifar10, resize_batch,
                   synthetic_dataset)
from .checkpoint import export_structure, load_store, save_store
from .pipeline import Pipeline, RunConfig, run_pipeline
from .presets import desk_arch, desk_budgets, preset_run_config

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "BNStats", "BudgetSolution", "CalibrationMissing",
    "ChannelMask", "Dataset", "DeviceBudget", "EvalResult", "FlopsReport",
    "FormatError", "InfeasibleBudget", "IterationPlan", "LayerSpec",
    "LossTerms", "NonFiniteError", "PNPEntry", "Pipeline", "PrunePoolError",
    "PrunedNetworkPool", "RunConfig", "SearchConfig", "ShapeMismatch",
    "SharedWeightStore", "SpecError", "TrainConfig", "build_network",
    "calibrate_bn", "calibrate_pool", "desk_arch", "desk_budgets",
    "evaluate", "evaluate_pool", "export_structure", "extract_mask",
    "iterate_batches", "load_cifar10", "load_store", "mask_similarity",
    "network_flops", "preset_run_config", "resize_batch", "run_pipeline",
    "run_search", "sample_iteration_plan", "save_store", "solve_budgets",
    "solve_pruning_rate", "sparsity_penalty", "subnetwork_view",
    "synthetic_dataset", "train_joint", "training_step",
]
