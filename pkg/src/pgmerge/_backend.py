"""Kernel backend selection.

The compiled ``_ckernels`` module is used when it imports; otherwise, or when
``PGMERGE_PURE_PYTHON`` is set to a non-empty value other than ``0``, the
pure-Python ``_pykernels`` module is used. Both expose the same functions.
"""
from __future__ import annotations

import importlib
import os
from types import ModuleType

from pgmerge import _pykernels


def _load_compiled() -> ModuleType | None:
    try:
        return importlib.import_module("pgmerge._ckernels")
    except ImportError:
        return None


_compiled = _load_compiled()


def available() -> list[str]:
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def get(name: str | None = None) -> ModuleType:
    """Return the kernel module called ``name``, or the default one."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


if os.environ.get("PGMERGE_PURE_PYTHON", "") not in ("", "0") or _compiled is None:
    kernels: ModuleType = _pykernels
else:
    kernels = _compiled

BACKEND = kernels.BACKEND_NAME
