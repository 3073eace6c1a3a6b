"""Probabilistic circuits with dense, Monarch, and butterfly sum blocks."""

from .circuit import (CircuitGraph, FlowTable, LeafBlock, ProductBlock,
                      SumBlock, evaluate_log, evaluate_log_batch, flows,
                      marginalize_log, sample, sample_batch, validate)
from .monarch import (DenseParam, IdentityParam, MonarchParam, materialize,
                      monarch_apply, monarch_apply_logspace, tied_monarch,
                      untie_param)
from .schedule import DimSchedule, flops_per_apply, memory_elements, plan_schedule

__all__ = [
    "CircuitGraph", "FlowTable", "LeafBlock", "ProductBlock", "SumBlock",
    "evaluate_log", "evaluate_log_batch", "flows", "marginalize_log",
    "sample", "sample_batch", "validate",
    "DenseParam", "IdentityParam", "MonarchParam", "materialize",
    "monarch_apply", "monarch_apply_logspace", "tied_monarch", "untie_param",
    "DimSchedule", "flops_per_apply", "memory_elements", "plan_schedule",
]

__version__ = "0.1.0"
