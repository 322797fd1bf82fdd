"""Select the compiled kernels when available, else the numpy fallback.

Set ``PAPC_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("PAPC_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py

sinr = _impl.sinr
utility = _impl.utility
utility_grad = _impl.utility_grad
project_rows = _impl.project_rows


def backend_module(name: str):
    """Return ``"compiled"`` or ``"python"`` kernels explicitly (for benchmarks and tests)."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
