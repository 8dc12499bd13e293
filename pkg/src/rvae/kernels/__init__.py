"""Sequential LSTM kernels with a compiled core and a numpy fallback.

The compiled extension is used when it has been built; set ``RVAE_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _fallback

fallback = _fallback
compiled = None

if os.environ.get("RVAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else _fallback
BACKEND = _impl.NAME


def available():
    """Names of the implementations importable in this environment."""
    names = ["python"]
    if compiled is not None:
        names.append("cython")
    return names


def get(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython" and compiled is not None:
        return compiled
    raise ValueError(f"kernel backend {name!r} is not available")


def use(name):
    """Switch the active implementation; returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    _impl = get(name)
    BACKEND = _impl.NAME
    return prev


def lstm_forward(xp, Wh, reverse=False, mask=None):
    return _impl.lstm_forward(xp, Wh, reverse, mask)


def lstm_backward(dh, c, gates, tc, Wh, reverse=False, mask=None):
    return _impl.lstm_backward(dh, c, gates, tc, Wh, reverse, mask)


def posterior_forward(P, eps, Wz, Wh, bp, Wuh, Wm, bm, Wv, bv, floor):
    return _impl.posterior_forward(P, eps, Wz, Wh, bp, Wuh, Wm, bm, Wv, bv, floor)


def posterior_backward(dz, dmu, dvar, z, var, eps, cache, Wz, Wh, Wuh, Wm, Wv):
    return _impl.posterior_backward(dz, dmu, dvar, z, var, eps, cache,
                                    Wz, Wh, Wuh, Wm, Wv)
