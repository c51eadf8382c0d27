"""Cost-aware routing of decomposed tasks over a heterogeneous model pool."""

from .kernels import BACKEND as KERNEL_BACKEND
from .pool import ModelPool, ModelSpec, load_pool, partition_groups, medium_model, usage_cost

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "ModelPool",
    "ModelSpec",
    "load_pool",
    "partition_groups",
    "medium_model",
    "usage_cost",
]
