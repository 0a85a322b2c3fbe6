"""bitalloc: mixed-precision bit-width allocation for small classifiers.

Measures each layer's quantization sensitivity from calibration samples,
casts the bit-width choice as a multiple-choice knapsack under a model-size
budget, and solves it greedily after dominance filtering. Exact solvers and
finite-difference oracles validate every approximation step at desk scale.
"""

__version__ = "0.1.0"

from .errors import (
    BitAllocError,
    BudgetError,
    InfeasibleError,
    ManifestError,
    NumericError,
    ShapeError,
)
from .net import (
    LayerSpec,
    NetworkSpec,
    Sample,
    Tensor,
    conv2d,
    dense,
    flatten,
    forward,
    global_avg_pool,
    mean_loss,
    per_sample_loss_grad,
    relu,
    softmax,
)
from .quantizer import QuantGrid, QuantResult, delta_w, quantize, quantize_with_error, solve_step_size
from .perturbation import (
    PerturbationTable,
    ProxyKind,
    convergence_profile,
    delta_w_table,
    perturbation_table,
)
from .mckp import (
    BitAssignment,
    MckpInstance,
    MckpItem,
    build_instance,
    dominance_filter,
    dp_exact,
    exhaustive,
    greedy_assign,
)
from .oracle import (
    QuantizedNetView,
    RankingReport,
    exact_hessian_quadratic,
    exact_loss_perturbation,
    gauss_newton_reference,
    quantized_view,
    ranking_fidelity,
)
from .manifest import Manifest, build_network, load_manifest
from .pipeline import RunReport, emit_reports, run_pipeline

__all__ = [
    "__version__",
    "BitAllocError",
    "BudgetError",
    "InfeasibleError",
    "ManifestError",
    "NumericError",
    "ShapeError",
    "LayerSpec",
    "NetworkSpec",
    "Sample",
    "Tensor",
    "conv2d",
    "dense",
    "flatten",
    "forward",
    "global_avg_pool",
    "mean_loss",
    "per_sample_loss_grad",
    "relu",
    "softmax",
    "QuantGrid",
    "QuantResult",
    "delta_w",
    "quantize",
    "quantize_with_error",
    "solve_step_size",
    "PerturbationTable",
    "ProxyKind",
    "convergence_profile",
    "delta_w_table",
    "perturbation_table",
    "BitAssignment",
    "MckpInstance",
    "MckpItem",
    "build_instance",
    "dominance_filter",
    "dp_exact",
    "exhaustive",
    "greedy_assign",
    "QuantizedNetView",
    "RankingReport",
    "exact_hessian_quadratic",
    "exact_loss_perturbation",
    "gauss_newton_reference",
    "quantized_view",
    "ranking_fidelity",
    "Manifest",
    "build_network",
    "load_manifest",
    "RunReport",
    "emit_reports",
    "run_pipeline",
]
