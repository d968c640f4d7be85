"""Kernel backend selection.

The compiled extension is preferred when importable; set FUSELM_BACKEND to
"python" or "cython" to force one side. Selection happens once at import.
"""
import importlib
import os

_REQUESTED = os.environ.get("FUSELM_BACKEND", "auto").lower()

if _REQUESTED not in ("auto", "python", "cython"):
    raise ValueError(
        f"FUSELM_BACKEND must be 'auto', 'python' or 'cython', got {_REQUESTED!r}"
    )

if _REQUESTED == "python":
    from . import py_kernels as kernels
else:
    try:
        from . import _speedups as kernels  # type: ignore[attr-defined]
    except ImportError:
        if _REQUESTED == "cython":
            raise
        from . import py_kernels as kernels

BACKEND = kernels.NAME


def load_backend(name):
    """Import a specific backend module regardless of the active selection."""
    if name == "python":
        return importlib.import_module(f"{__name__}.py_kernels")
    if name == "cython":
        return importlib.import_module(f"{__name__}._speedups")
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    out = ["python"]
    try:
        load_backend("cython")
        out.append("cython")
    except ImportError:
        pass
    return out
