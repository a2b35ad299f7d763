"""Kernel backend selection.

Prefers the compiled Cython extension; falls back to the NumPy
implementation when the extension is missing or when the environment
variable ``SLOTGATE_NO_EXT`` is set (used by the parity tests and the
benchmark).
"""

import os

from . import _kernels_py

if os.environ.get("SLOTGATE_NO_EXT"):
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = _kernels_py


def backend_name() -> str:
    return kernels.BACKEND


def get_kernels(name: str | None = None):
    """Return a kernel module by name ("compiled", "python" or None=active)."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend: {name!r}")
