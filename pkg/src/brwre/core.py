"""Backend selection for the snake kernels.

The compiled extension is used when importable; ``BRWRE_BACKEND=python``
forces the pure-Python reference.  Both produce identical numbers.
"""

from __future__ import annotations

import os

from . import _pycore

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None


def backend(name: str | None = None):
    """Return the kernel module for ``name`` (``"compiled"``, ``"python"`` or default)."""
    name = name or os.environ.get("BRWRE_BACKEND", "auto")
    if name == "python":
        return _pycore
    if name in ("compiled", "cython"):
        if _compiled is None:
            raise ImportError("compiled core brwre._core is not built")
        return _compiled
    if name != "auto":
        raise ValueError(f"unknown backend {name!r}")
    return _compiled if _compiled is not None else _pycore


def backend_name(name: str | None = None) -> str:
    return "python" if backend(name) is _pycore else "compiled"


HAVE_COMPILED = _compiled is not None
