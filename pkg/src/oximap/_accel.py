"""Backend selection for the compiled kernels.

Two interchangeable execution paths exist for every hot loop: a numba
@njit kernel and a vectorized pure-numpy fallback.  The active default is
chosen once at import from the OXIMAP_BACKEND environment variable
("numba" or "numpy"); individual call sites accept a `backend=` override.
When numba is not importable the numpy path is used regardless.
"""

import os

from .errors import ConfigError

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        # signature-compatible no-op decorator
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap

    prange = range

_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    name = os.environ.get("OXIMAP_BACKEND", "").strip().lower()
    if name and name not in _VALID:
        raise ConfigError(
            f"OXIMAP_BACKEND must be one of {_VALID}, got {name!r}"
        )
    if name == "numba" and not HAVE_NUMBA:
        raise ConfigError("OXIMAP_BACKEND=numba but numba is not importable")
    if not name:
        name = "numba" if HAVE_NUMBA else "numpy"
    return name


_active = _initial_backend()


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    """Switch the process-wide default backend."""
    global _active
    if name not in _VALID:
        raise ConfigError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    _active = name


def resolve_backend(override=None) -> str:
    """Pick the backend for one call: explicit override wins, else default."""
    if override is None:
        return _active
    if override not in _VALID:
        raise ConfigError(f"backend must be one of {_VALID}, got {override!r}")
    if override == "numba" and not HAVE_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    return override
