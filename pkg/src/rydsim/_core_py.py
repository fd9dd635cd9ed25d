"""Pure-numpy twin of the compiled core.

Same algorithm, same tableau, same controller constants as ``_core.pyx`` so
the two backends agree to rounding. Kept deliberately close to the Cython
text; speed matters less than fidelity here.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from ._rk import DP_A, DP_B, DP_C, DP_E

_GAUSS, _CEXP, _RPOW6 = 1, 2, 3


def _coeff(code: int, p, t: float) -> complex:
    if code == _GAUSS:
        x = (t - p[1]) / p[0]
        return math.exp(-0.5 * x * x)
    if code == _CEXP:
        return complex(math.cos(p[0] * t), math.sin(p[0] * t))
    if code == _RPOW6:
        return p[0] / (p[1] + p[2] * t + p[3] * t * t) ** 3
    raise ValueError(f"unknown coefficient code {code}")


class _Workspace:
    def __init__(self, prep):
        dim = prep.dim
        self.G = sp.csr_matrix(
            (prep.g_static.copy(), prep.indices, prep.indptr), shape=(dim, dim)
        )
        self.channels = []
        C = prep.n_channels
        for c in range(C):
            lo, hi = prep.ch_offsets[c], prep.ch_offsets[c + 1]
            ct = sp.csr_matrix(
                (prep.ch_data[lo:hi], prep.ch_indices[lo:hi], prep.ch_rowptr[c]),
                shape=(dim, dim),
            )
            self.channels.append(ct)

    def rhs(self, prep, t: float, y: np.ndarray) -> np.ndarray:
        data = prep.g_static
        if len(prep.term_codes):
            data = data.copy()
            for k, code in enumerate(prep.term_codes):
                data += _coeff(int(code), prep.term_params[k], t) * prep.term_data[k]
        self.G.data[:] = data
        m = self.G @ y
        out = m + m.conj().T
        for ct in self.channels:
            s = ct @ y
            out += ct @ s.conj().T
        return np.asarray(out)


def integrate_segment(prep, rho, rel_tol, abs_tol, max_step, method, fixed_step,
                      max_steps, hermitize):
    """Advance rho over [0, prep.duration]. Returns (rho, steps, rhs_evals,
    rejected, status)."""
    ws = _Workspace(prep)
    y = np.array(rho, dtype=np.complex128, order="C")
    T = prep.duration
    nsteps = nrhs = nrej = 0

    if method == 1:  # fixed RK4
        h = min(fixed_step if fixed_step else max_step, max_step)
        n = max(1, int(math.ceil(T / h - 1e-12)))
        h = T / n
        for i in range(n):
            t = i * h
            k1 = ws.rhs(prep, t, y)
            k2 = ws.rhs(prep, t + 0.5 * h, y + (0.5 * h) * k1)
            k3 = ws.rhs(prep, t + 0.5 * h, y + (0.5 * h) * k2)
            k4 = ws.rhs(prep, t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if hermitize:
                y = 0.5 * (y + y.conj().T)
            nsteps += 1
            nrhs += 4
        if not np.isfinite(y).all():
            return y, nsteps, nrhs, nrej, 3
        return y, nsteps, nrhs, nrej, 0

    t = 0.0
    h = min(max_step, T)
    k = [None] * 7
    k[0] = ws.rhs(prep, 0.0, y)
    nrhs += 1
    while t < T * (1.0 - 1e-15):
        # underflow means the controller collapsed, not that the interval's
        # final sliver is short; clamp with a separate step variable
        if h < T * 1e-14 or h <= 0:
            return y, nsteps, nrhs, nrej, 3
        hs = h if t + h <= T else T - t
        for i in range(1, 7):
            yi = y.copy()
            for j in range(i):
                a = DP_A[i][j]
                if a:
                    yi += (hs * a) * k[j]
            k[i] = ws.rhs(prep, t + DP_C[i] * hs, yi)
            nrhs += 1
        ynew = y.copy()
        for j in range(7):
            if DP_B[j]:
                ynew += (hs * DP_B[j]) * k[j]
        err = np.zeros_like(y)
        for j in range(7):
            if DP_E[j]:
                err += (hs * DP_E[j]) * k[j]
        scale = abs_tol + rel_tol * np.maximum(np.abs(y), np.abs(ynew))
        enorm = float(np.sqrt(np.mean(np.abs(err / scale) ** 2)))
        if not math.isfinite(enorm):
            return y, nsteps, nrhs, nrej, 3
        if enorm <= 1.0:
            t += hs
            y = ynew
            if hermitize:
                y = 0.5 * (y + y.conj().T)
            k[0] = ws.rhs(prep, t, y)
            nrhs += 1
            nsteps += 1
        else:
            nrej += 1
        if enorm > 0.0:
            fac = 0.9 * enorm**-0.2
        else:
            fac = 5.0
        h = min(h * min(5.0, max(0.2, fac)), max_step)
        if nsteps + nrej > max_steps:
            return y, nsteps, nrhs, nrej, 1
    return y, nsteps, nrhs, nrej, 0
