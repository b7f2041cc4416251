"""Kernel backend selection.

The compiled Cython extension is preferred when importable; the NumPy
fallback is always available. ECHOTRACE_BACKEND=compiled|fallback forces a
choice (forcing "compiled" raises if the extension is missing).
"""

import os

from . import fallback

try:
    from . import _compiled
except ImportError:
    _compiled = None


def available_backends() -> tuple[str, ...]:
    return ("compiled", "fallback") if _compiled is not None else ("fallback",)


def get_backend(name: str | None = None):
    """Return the kernel module for `name` (default: env var, then best)."""
    if name is None:
        name = os.environ.get("ECHOTRACE_BACKEND")
    if name is None:
        return _compiled if _compiled is not None else fallback
    if name == "fallback":
        return fallback
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError(
                "compiled kernels requested but the extension is not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def active_backend_name() -> str:
    return get_backend().name
