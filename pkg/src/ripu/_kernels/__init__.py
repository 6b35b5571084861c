"""Kernel backend selection.

The compiled Cython core is preferred when it imported cleanly; the numpy
fallback is always available.  Set RIPU_KERNELS=python (or =compiled) to
force a backend, e.g. for the backend comparison benchmark.
"""

import os

from ripu._kernels import _py

_forced = os.environ.get("RIPU_KERNELS", "").strip().lower()

if _forced == "python":
    _impl = _py
    BACKEND = "python"
else:
    try:
        from ripu._kernels import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise ImportError(
                "RIPU_KERNELS=compiled but the compiled kernel core is not built; "
                "run `python setup.py build_ext --inplace`"
            )
        _impl = _py
        BACKEND = "python"

region_sizes = _impl.region_sizes
window_sums = _impl.window_sums
label_window_counts = _impl.label_window_counts
entropy_map = _impl.entropy_map
impurity_map = _impl.impurity_map
greedy_select = _impl.greedy_select


def available_backends():
    """Names of importable backends, the selected one first."""
    names = [BACKEND]
    if BACKEND == "compiled":
        names.append("python")
    else:
        try:
            from ripu._kernels import _core  # noqa: F401

            names.append("compiled")
        except ImportError:
            pass
    return names


def get_backend(name):
    """Return the backend module for `name` in {"python", "compiled"}."""
    if name == "python":
        return _py
    if name == "compiled":
        from ripu._kernels import _core

        return _core
    raise ValueError(f"unknown kernel backend {name!r}")
