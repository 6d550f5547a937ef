"""Kernel backend selection.

The compiled ``_ckernels`` module is used when it imports; otherwise the numpy
implementation in ``_pykernels``. Set ``FEDMERDEL_KERNELS=python`` to force the
fallback (the benchmark and the backend-equivalence tests do this).
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels


def _load(name: str | None = None) -> ModuleType:
    choice = name or os.environ.get("FEDMERDEL_KERNELS", "auto")
    if choice == "python":
        return _pykernels
    try:
        from . import _ckernels
    except ImportError:
        if choice == "cython":
            raise
        return _pykernels
    return _ckernels


_backend = _load()
BACKEND = "cython" if _backend is not _pykernels else "python"


def use(name: str) -> str:
    """Switch backend at runtime ("cython", "python" or "auto"); returns the active name."""
    global _backend, BACKEND
    _backend = _load(name)
    BACKEND = "cython" if _backend is not _pykernels else "python"
    return BACKEND


def backend_module(name: str) -> ModuleType:
    return _load(name)


def estep(idx, elogpi, elogphi_t):
    return _backend.estep(idx, elogpi, elogphi_t)


def log_rho(idx, elogpi, elogphi_t):
    return _backend.log_rho(idx, elogpi, elogphi_t)


def category_counts(idx, resp, n_columns):
    return _backend.category_counts(idx, resp, n_columns)


def hamming_assign(values, modes):
    return _backend.hamming_assign(values, modes)
