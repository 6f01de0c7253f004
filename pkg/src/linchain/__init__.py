"""LinChain: chained linear low-rank adapters with LoRA and MoSLoRA baselines."""

from .adapters import (
    AdaptedLinear,
    AdapterConfig,
    collapse_to_lora,
    delta_weight,
    forward,
    init_adapter,
    merge,
    param_count,
)
from .gradients import (
    GradientSet,
    LossSpec,
    backward_analytic,
    finite_difference_grad,
    grad_check,
    output_delta,
    trace_dependencies,
)
from .linalg import RngState, kaiming_uniform, matmul, max_abs_diff, transpose
from .training import OptimizerConfig, TaskSpec, compare_methods, make_task, train

__all__ = [
    "AdaptedLinear",
    "AdapterConfig",
    "GradientSet",
    "LossSpec",
    "OptimizerConfig",
    "RngState",
    "TaskSpec",
    "backward_analytic",
    "collapse_to_lora",
    "compare_methods",
    "delta_weight",
    "finite_difference_grad",
    "forward",
    "grad_check",
    "init_adapter",
    "kaiming_uniform",
    "make_task",
    "matmul",
    "max_abs_diff",
    "merge",
    "output_delta",
    "param_count",
    "trace_dependencies",
    "train",
    "transpose",
]
