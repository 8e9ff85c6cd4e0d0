"""Partitioned linear attention for jet tagging, built on a small numpy autodiff core."""

from .errors import SaltError
from .model import ModelConfig, build_model, count_params, forward, preset
from .profiler import cost_report, flops_estimate

__all__ = ["ModelConfig", "SaltError", "build_model", "cost_report", "count_params", "flops_estimate", "forward",
           "preset"]
__version__ = "0.1.0"
