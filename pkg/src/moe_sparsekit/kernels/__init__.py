"""Hot loops behind the linear-algebra and engine layers.

Two interchangeable backends expose the same functions:

* ``numba``: ``@njit`` compiled loops (default when numba imports).
* ``numpy``: vectorized fallback, no compilation.

Set ``MOE_SPARSEKIT_BACKEND=numpy`` (or ``numba``) before import to pick
one.  Both accumulate in float32 along the reduction axis in ascending
order, so they agree bit for bit.
"""
import importlib
import os
import warnings
from contextlib import contextmanager
from types import ModuleType

ENV_VAR = "MOE_SPARSEKIT_BACKEND"
BACKENDS = ("numba", "numpy")


def get_backend(name: str) -> ModuleType:
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {BACKENDS}")
    return importlib.import_module(f"{__name__}._{name}")


def available_backends() -> list[str]:
    names = []
    for name in BACKENDS:
        try:
            get_backend(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select() -> tuple[str, ModuleType]:
    requested = os.environ.get(ENV_VAR, "").strip().lower() or "numba"
    try:
        return requested, get_backend(requested)
    except ImportError:
        if requested == "numba":
            warnings.warn("numba unavailable, falling back to the numpy kernels")
            return "numpy", get_backend("numpy")
        raise


BACKEND_NAME, backend = _select()


@contextmanager
def use_backend(name: str):
    """Temporarily route every kernel call through ``name``."""
    global BACKEND_NAME, backend
    saved = BACKEND_NAME, backend
    BACKEND_NAME, backend = name, get_backend(name)
    try:
        yield backend
    finally:
        BACKEND_NAME, backend = saved
