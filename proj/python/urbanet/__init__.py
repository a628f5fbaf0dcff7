"""Masked U-Net regression of urban land change on gridded rasters."""

from ._urbanet import (
    UrbanetError,
    WorldGrid,
    gen_world,
    grad_check,
    load_grid,
    masked_mse,
    median_of,
    residual_metrics,
    run_cli,
    split_counts,
    transform_plane,
)

__all__ = [
    "UrbanetError",
    "WorldGrid",
    "gen_world",
    "grad_check",
    "load_grid",
    "masked_mse",
    "median_of",
    "residual_metrics",
    "run_cli",
    "split_counts",
    "transform_plane",
]
