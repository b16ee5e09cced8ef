"""Selects the compiled kernel when importable, else the pure-Python twin.

Set ``MPPTSIM_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernel

BACKEND = "python"
_impl = _pykernel
if not os.environ.get("MPPTSIM_PURE_PYTHON"):
    try:
        from . import _ckernel as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        pass

STATUS_OK = 0
STATUS_SOLVER = 1
STATUS_NONFINITE = 2


def backend_module(name=None):
    """Return the kernel module for ``name`` ("cython"/"python"), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernel
    if name == "cython":
        from . import _ckernel

        return _ckernel
    raise ValueError(f"unknown kernel backend {name!r}")


def as_rows(mods):
    """Normalize module parameter rows for the active backend."""
    arr = np.ascontiguousarray(mods, dtype=np.float64).reshape(-1, 5)
    return arr


def string_current(v, mods, vb, guess=0.0, backend=None):
    impl = backend_module(backend)
    rows = as_rows(mods)
    if impl is _pykernel:
        rows = [tuple(r) for r in rows.tolist()]
    return impl.string_current(float(v), rows, float(vb), float(guess),
                               [0.0] * len(rows))


def string_voltage(i, mods, vb, backend=None):
    impl = backend_module(backend)
    rows = as_rows(mods)
    if impl is _pykernel:
        rows = [tuple(r) for r in rows.tolist()]
    return impl.string_voltage(float(i), rows, float(vb), [0.0] * len(rows))


def integrate(state, conv, mods, vb, mode, command, k_p, r_damp, d_min, d_max,
              n_steps, avg_start, record_every, out, backend=None):
    """Run the plant kernel; ``state`` is a float64 array updated in place."""
    impl = backend_module(backend)
    rows = as_rows(mods)
    if impl is _pykernel:
        rows = [tuple(r) for r in rows.tolist()]
    return impl.integrate(state, tuple(float(c) for c in conv), rows, float(vb),
                          int(mode), float(command), float(k_p), float(r_damp),
                          float(d_min), float(d_max), int(n_steps),
                          int(avg_start), max(int(record_every), 1), out)
