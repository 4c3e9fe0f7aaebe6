"""Text-anchored binding of per-modality image encoders into one embedding space.

A small numpy autodiff core drives CLIP-style pretraining, LoRA-based binding
with adaptive modality balancing, and distillation of the bound text encoders
into a single student. Hot kernels run under numba unless
``M3BIND_DISABLE_NUMBA=1`` is set.
"""
from ._kernels import BACKEND
from .config import RunConfig
from .pipeline import Phase0Cache, evaluate, make_dataset, run_experiment

__all__ = ["BACKEND", "Phase0Cache", "RunConfig", "evaluate", "make_dataset", "run_experiment"]
__version__ = "0.1.0"
