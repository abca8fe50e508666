"""Gradient-free merging of LoRA-finetuned models with joint-SVD alignment."""

from knots.checkpoint_io import (
    LoraAdapter,
    TaskUpdate,
    TensorMap,
    apply_update,
    load_adapter,
    load_tensor_map,
    materialize_update,
    save_tensor_map,
)
from knots.knots_align import (
    AlignedDecomposition,
    knots_decompose,
    knots_merge,
    merge,
    row_vs_column_compare,
    sigma_scaled_blocks,
)
from knots.update_algebra import (
    MergeConfig,
    MergedUpdate,
    dare_ties_merge,
    dare_transform,
    merge_ta,
    sign_elect,
    ties_merge,
    ties_trim,
)

__version__ = "0.1.0"

__all__ = [
    "AlignedDecomposition",
    "LoraAdapter",
    "MergeConfig",
    "MergedUpdate",
    "TaskUpdate",
    "TensorMap",
    "apply_update",
    "dare_ties_merge",
    "dare_transform",
    "knots_decompose",
    "knots_merge",
    "load_adapter",
    "load_tensor_map",
    "materialize_update",
    "merge",
    "merge_ta",
    "row_vs_column_compare",
    "save_tensor_map",
    "sigma_scaled_blocks",
    "sign_elect",
    "ties_merge",
    "ties_trim",
]
