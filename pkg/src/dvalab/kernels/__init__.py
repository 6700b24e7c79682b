"""Fused RK4 flow kernels for a scalar state and a ``[1, H, 1]`` tanh field.

The compiled extension is used when it was built and imports cleanly; set
``DVALAB_PURE_PYTHON=1`` to force the numpy implementation.  ``BACKEND``
names the active implementation.
"""

from __future__ import annotations

import os

from . import _pyflow

python_impl = _pyflow
compiled_impl = None

if os.environ.get("DVALAB_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pyflow
else:
    try:
        from . import _cflow as compiled_impl  # type: ignore[attr-defined]

        _impl = compiled_impl
    except ImportError:
        _impl = _pyflow

BACKEND = "python" if _impl is _pyflow else "compiled"

flow_forward = _impl.flow_forward
flow_tangent = _impl.flow_tangent
flow_vjp = _impl.flow_vjp

__all__ = ["BACKEND", "flow_forward", "flow_tangent", "flow_vjp", "python_impl", "compiled_impl"]
