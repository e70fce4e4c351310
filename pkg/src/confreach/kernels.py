"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise (or when
``CONFREACH_PURE_PYTHON`` is set) the pure-Python twin is used.  Both expose
the same functions with bitwise-identical results.
"""
from __future__ import annotations

import os

from . import _kernels_py as python_backend

compiled_backend = None
if not os.environ.get("CONFREACH_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

controller_eval = _impl.controller_eval
controller_eval_interval = _impl.controller_eval_interval
dynamics_step = _impl.dynamics_step
dynamics_step_interval = _impl.dynamics_step_interval
closed_loop_box_step = _impl.closed_loop_box_step
noise_amplitude = _impl.noise_amplitude
rollout = _impl.rollout
region_stats = _impl.region_stats

ACT_CODES = {"id": 0, "identity": 0, "sigmoid": 1, "tanh": 2, "relu": 3}
KIND_MLP = python_backend.KIND_MLP
KIND_ENERGY = python_backend.KIND_ENERGY
