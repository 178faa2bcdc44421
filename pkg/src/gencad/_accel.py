"""Numba switch.

Hot kernels are written twice: a numba ``@njit`` version and a vectorized
numpy version. ``GENCAD_DISABLE_NUMBA=1`` (or a missing numba install)
selects the numpy path everywhere.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("GENCAD_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, cache=True, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda f: f


def set_backend(use_numba):
    """Switch backends at runtime (tests and the benchmark use this)."""
    global USE_NUMBA
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    USE_NUMBA = bool(use_numba)


def backend():
    return "numba" if USE_NUMBA else "numpy"
