"""Numba switch.

Hot kernels are decorated with :func:`njit`.  Setting ``LFMMI_DISABLE_JIT=1``
(or running without numba installed) turns the decorator into a no-op and the
dispatchers in :mod:`lfmmi.kernels` route to the vectorised numpy versions.
"""
import os

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False

JIT_DISABLED = (os.environ.get("LFMMI_DISABLE_JIT", "0").lower() in ("1", "true", "yes")
                or not HAVE_NUMBA)


def njit(func=None, **kwargs):
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if JIT_DISABLED:
        return func if func is not None else (lambda f: f)
    if func is None:
        return nb.njit(**kwargs)
    return nb.njit(**kwargs)(func)
