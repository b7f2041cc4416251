"""Transient three-bounce rendering and around-the-corner reconstruction."""

__version__ = "0.1.0"

from .kernels import active_backend_name, available_backends  # noqa: F401
