"""Binary neural network kernels and cost model."""

from ._core import (
    ArgumentError,
    ConfigError,
    DimensionError,
    binary_conv2d,
    binary_gemm,
    combine_ops,
    count_ops,
    dysign_overhead,
    preset_names,
    run_cli,
    xnor_popcount_dot,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "DimensionError",
    "binary_conv2d",
    "binary_gemm",
    "combine_ops",
    "count_ops",
    "dysign_overhead",
    "preset_names",
    "run_cli",
    "xnor_popcount_dot",
]
