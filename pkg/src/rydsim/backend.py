"""Integration backend selection.

The compiled extension is preferred when importable; the numpy twin is the
fallback. ``RYDSIM_BACKEND`` overrides: ``compiled`` demands the extension
(ImportError if missing), ``python`` forces the fallback, ``auto`` (default)
picks whatever is available.
"""

from __future__ import annotations

import os

import numpy as np

_choice = os.environ.get("RYDSIM_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(
        f"RYDSIM_BACKEND={_choice!r}: expected 'auto', 'compiled' or 'python'"
    )

if _choice == "python":
    from . import _core_py as _impl

    _NAME = "python"
elif _choice == "compiled":
    from . import _core as _impl

    _NAME = "compiled"
else:
    try:
        from . import _core as _impl

        _NAME = "compiled"
    except ImportError:
        from . import _core_py as _impl

        _NAME = "python"


def backend_name() -> str:
    return _NAME


def is_compiled() -> bool:
    return _NAME == "compiled"


def integrate(prep, rho: np.ndarray, cfg):
    """Advance ``rho`` across one prepared segment under ``cfg``.

    Returns ``(rho_final, EvolveStats)``; raises NumericsError when the
    stepper gives up (budget exhausted, step collapse, non-finite state).
    """
    from .lindblad import EvolveStats, NumericsError

    method = 1 if cfg.method.name == "RK4_FIXED" else 0
    out, steps, nrhs, nrej, status = _impl.integrate_segment(
        prep,
        np.ascontiguousarray(rho, dtype=np.complex128),
        float(cfg.rel_tol),
        float(cfg.abs_tol),
        float(prep.max_step),
        method,
        float(cfg.fixed_step or 0.0),
        int(cfg.max_steps),
        bool(cfg.hermitize),
    )
    if status == 1:
        raise NumericsError(
            f"step budget exhausted ({steps} accepted, {nrej} rejected)"
        )
    if status != 0:
        raise NumericsError("step size underflow or non-finite state")
    return out, EvolveStats(steps=steps, rhs_evals=nrhs, rejected=nrej, status=status)
