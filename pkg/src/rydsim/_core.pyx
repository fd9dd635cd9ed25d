# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integration core.

One entry point, ``integrate_segment``: adaptive Dormand-Prince 5(4) (or
fixed RK4) over a single protocol segment whose generator was flattened by
``lindblad.prepare_generator``. The numpy twin ``_core_py`` implements the
identical algorithm; keep the two in lockstep when changing anything.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, cos, exp, isfinite, sin, sqrt

cnp.import_array()

ctypedef double complex dcplx

cdef extern from "complex.h" nogil:
    double cabs(dcplx)
    double creal(dcplx)
    dcplx conj(dcplx)


cdef inline dcplx _coeff(long code, double p0, double p1, double p2, double p3,
                         double t) nogil:
    cdef double x, d
    if code == 1:  # gaussian envelope
        x = (t - p1) / p0
        return exp(-0.5 * x * x)
    elif code == 2:  # complex exponential
        x = p0 * t
        return cos(x) + 1j * sin(x)
    elif code == 3:  # -C6/r(t)^6 with quadratic r^2(t)
        d = p1 + p2 * t + p3 * t * t
        return p0 / (d * d * d)
    return 0.0


cdef void _rhs(double t,
               dcplx[:, ::1] y, dcplx[:, ::1] out,
               Py_ssize_t dim,
               cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
               dcplx[::1] g_static, dcplx[::1] gbuf,
               cnp.int64_t[::1] term_codes, double[:, ::1] term_params,
               dcplx[:, ::1] term_data,
               cnp.int64_t[:, ::1] ch_rowptr, cnp.int64_t[::1] ch_indices,
               dcplx[::1] ch_data, cnp.int64_t[::1] ch_offsets,
               cnp.int64_t[::1] ch_nzrows, cnp.int64_t[::1] ch_nzoffsets,
               dcplx[:, ::1] tbuf) nogil:
    cdef Py_ssize_t nnz = indices.shape[0]
    cdef Py_ssize_t K = term_codes.shape[0]
    cdef Py_ssize_t C = ch_offsets.shape[0] - 1
    cdef Py_ssize_t i, j, p, b, k, c, s, s2, lo, hi, base
    cdef dcplx v, acc, ck
    cdef bint first

    for p in range(nnz):
        gbuf[p] = g_static[p]
    for k in range(K):
        ck = _coeff(term_codes[k], term_params[k, 0], term_params[k, 1],
                    term_params[k, 2], term_params[k, 3], t)
        for p in range(nnz):
            gbuf[p] = gbuf[p] + ck * term_data[k, p]

    # out = G y
    for i in range(dim):
        for j in range(dim):
            out[i, j] = 0
        for p in range(indptr[i], indptr[i + 1]):
            v = gbuf[p]
            if v == 0:
                continue
            b = indices[p]
            for j in range(dim):
                out[i, j] = out[i, j] + v * y[b, j]

    # out = G y + (G y)^dagger
    for i in range(dim):
        out[i, i] = out[i, i] + conj(out[i, i])
        for j in range(i + 1, dim):
            acc = out[i, j] + conj(out[j, i])
            out[i, j] = acc
            out[j, i] = conj(acc)

    # out += ct y ct^dagger per channel (ct rows are sparse; y Hermitian)
    for c in range(C):
        base = ch_offsets[c]
        for s in range(ch_nzoffsets[c], ch_nzoffsets[c + 1]):
            i = ch_nzrows[s]
            lo = base + ch_rowptr[c, i]
            hi = base + ch_rowptr[c, i + 1]
            first = True
            for p in range(lo, hi):
                v = ch_data[p]
                b = ch_indices[p]
                if first:
                    for j in range(dim):
                        tbuf[i, j] = v * y[b, j]
                    first = False
                else:
                    for j in range(dim):
                        tbuf[i, j] = tbuf[i, j] + v * y[b, j]
        for s in range(ch_nzoffsets[c], ch_nzoffsets[c + 1]):
            i = ch_nzrows[s]
            lo = base + ch_rowptr[c, i]
            hi = base + ch_rowptr[c, i + 1]
            for p in range(lo, hi):
                v = ch_data[p]
                b = ch_indices[p]
                for s2 in range(ch_nzoffsets[c], ch_nzoffsets[c + 1]):
                    j = ch_nzrows[s2]
                    out[i, j] = out[i, j] + v * conj(tbuf[j, b])


# Dormand-Prince tableau (must match _rk.py)
cdef double C2 = 1.0 / 5, C3 = 3.0 / 10, C4 = 4.0 / 5, C5 = 8.0 / 9
cdef double A21 = 1.0 / 5
cdef double A31 = 3.0 / 40, A32 = 9.0 / 40
cdef double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9
cdef double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561, A54 = -212.0 / 729
cdef double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247, A64 = 49.0 / 176, A65 = -5103.0 / 18656
cdef double B1 = 35.0 / 384, B3 = 500.0 / 1113, B4 = 125.0 / 192, B5 = -2187.0 / 6784, B6 = 11.0 / 84
cdef double E1 = 71.0 / 57600, E3 = -71.0 / 16695, E4 = 71.0 / 1920
cdef double E5 = -17253.0 / 339200, E6 = 22.0 / 525, E7 = -1.0 / 40


def integrate_segment(prep, rho, double rel_tol, double abs_tol, double max_step,
                      long method, double fixed_step, long max_steps,
                      bint hermitize):
    """Mirror of _core_py.integrate_segment with the loop in C."""
    cdef Py_ssize_t dim = prep.dim
    cdef double T = prep.duration

    cdef cnp.int64_t[::1] indptr = np.ascontiguousarray(prep.indptr, dtype=np.int64)
    cdef cnp.int64_t[::1] indices = np.ascontiguousarray(prep.indices, dtype=np.int64)
    cdef dcplx[::1] g_static = np.ascontiguousarray(prep.g_static, dtype=np.complex128)
    cdef cnp.int64_t[::1] term_codes = np.ascontiguousarray(prep.term_codes, dtype=np.int64)
    cdef double[:, ::1] term_params = np.ascontiguousarray(
        prep.term_params.reshape(-1, 4), dtype=np.float64)
    cdef dcplx[:, ::1] term_data = np.ascontiguousarray(
        prep.term_data.reshape(len(prep.term_codes), len(prep.indices)),
        dtype=np.complex128)
    cdef cnp.int64_t[:, ::1] ch_rowptr = np.ascontiguousarray(
        prep.ch_rowptr.reshape(prep.n_channels, dim + 1), dtype=np.int64)
    cdef cnp.int64_t[::1] ch_indices = np.ascontiguousarray(prep.ch_indices, dtype=np.int64)
    cdef dcplx[::1] ch_data = np.ascontiguousarray(prep.ch_data, dtype=np.complex128)
    cdef cnp.int64_t[::1] ch_offsets = np.ascontiguousarray(prep.ch_offsets, dtype=np.int64)
    cdef cnp.int64_t[::1] ch_nzrows = np.ascontiguousarray(prep.ch_nzrows, dtype=np.int64)
    cdef cnp.int64_t[::1] ch_nzoffsets = np.ascontiguousarray(prep.ch_nzoffsets, dtype=np.int64)

    y_arr = np.array(rho, dtype=np.complex128, order="C")
    cdef dcplx[:, ::1] y = y_arr
    cdef dcplx[:, ::1] ynew = np.empty((dim, dim), dtype=np.complex128)
    cdef dcplx[:, ::1] ystage = np.empty((dim, dim), dtype=np.complex128)
    cdef dcplx[:, ::1] tbuf = np.empty((dim, dim), dtype=np.complex128)
    cdef dcplx[::1] gbuf = np.empty(indices.shape[0], dtype=np.complex128)
    stage_arr = np.empty((7, dim, dim), dtype=np.complex128)
    cdef dcplx[:, :, ::1] kk = stage_arr

    cdef long nsteps = 0, nrhs = 0, nrej = 0, status = 0, n, step_i
    cdef double t = 0.0, h, hs, fac, enorm, sc, e2, ay, ayn
    cdef double w1, w2, w3, w4, w5, w6, w7
    cdef Py_ssize_t i, j, nn = dim * dim
    cdef dcplx ev, avg

    if method == 1:
        h = fixed_step if fixed_step > 0 else max_step
        if h > max_step:
            h = max_step
        n = <long> ceil(T / h - 1e-12)
        if n < 1:
            n = 1
        h = T / n
        with nogil:
            for step_i in range(n):
                t = step_i * h
                _rhs(t, y, kk[0], dim, indptr, indices, g_static, gbuf,
                     term_codes, term_params, term_data, ch_rowptr, ch_indices,
                     ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
                for i in range(dim):
                    for j in range(dim):
                        ystage[i, j] = y[i, j] + (0.5 * h) * kk[0, i, j]
                _rhs(t + 0.5 * h, ystage, kk[1], dim, indptr, indices, g_static, gbuf,
                     term_codes, term_params, term_data, ch_rowptr, ch_indices,
                     ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
                for i in range(dim):
                    for j in range(dim):
                        ystage[i, j] = y[i, j] + (0.5 * h) * kk[1, i, j]
                _rhs(t + 0.5 * h, ystage, kk[2], dim, indptr, indices, g_static, gbuf,
                     term_codes, term_params, term_data, ch_rowptr, ch_indices,
                     ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
                for i in range(dim):
                    for j in range(dim):
                        ystage[i, j] = y[i, j] + h * kk[2, i, j]
                _rhs(t + h, ystage, kk[3], dim, indptr, indices, g_static, gbuf,
                     term_codes, term_params, term_data, ch_rowptr, ch_indices,
                     ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
                for i in range(dim):
                    for j in range(dim):
                        y[i, j] = y[i, j] + (h / 6.0) * (
                            kk[0, i, j] + 2.0 * kk[1, i, j] + 2.0 * kk[2, i, j] + kk[3, i, j])
                nrhs += 4
                nsteps += 1
                if hermitize:
                    for i in range(dim):
                        y[i, i] = creal(y[i, i])
                        for j in range(i + 1, dim):
                            avg = 0.5 * (y[i, j] + conj(y[j, i]))
                            y[i, j] = avg
                            y[j, i] = conj(avg)
        if not np.isfinite(y_arr).all():
            status = 3
        return y_arr, nsteps, nrhs, nrej, status

    h = max_step if max_step < T else T
    with nogil:
        _rhs(0.0, y, kk[0], dim, indptr, indices, g_static, gbuf,
             term_codes, term_params, term_data, ch_rowptr, ch_indices,
             ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
        nrhs += 1
        while t < T * (1.0 - 1e-15):
            # underflow means the controller collapsed, not that the
            # interval's final sliver is short; clamp separately via hs
            if h < T * 1e-14 or h <= 0.0:
                status = 3
                break
            hs = h if t + h <= T else T - t

            w1 = hs * A21
            for i in range(dim):
                for j in range(dim):
                    ystage[i, j] = y[i, j] + w1 * kk[0, i, j]
            _rhs(t + C2 * hs, ystage, kk[1], dim, indptr, indices, g_static, gbuf,
                 term_codes, term_params, term_data, ch_rowptr, ch_indices,
                 ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
            w1 = hs * A31
            w2 = hs * A32
            for i in range(dim):
                for j in range(dim):
                    ystage[i, j] = y[i, j] + w1 * kk[0, i, j] + w2 * kk[1, i, j]
            _rhs(t + C3 * hs, ystage, kk[2], dim, indptr, indices, g_static, gbuf,
                 term_codes, term_params, term_data, ch_rowptr, ch_indices,
                 ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
            w1 = hs * A41
            w2 = hs * A42
            w3 = hs * A43
            for i in range(dim):
                for j in range(dim):
                    ystage[i, j] = (y[i, j] + w1 * kk[0, i, j] + w2 * kk[1, i, j]
                                    + w3 * kk[2, i, j])
            _rhs(t + C4 * hs, ystage, kk[3], dim, indptr, indices, g_static, gbuf,
                 term_codes, term_params, term_data, ch_rowptr, ch_indices,
                 ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
            w1 = hs * A51
            w2 = hs * A52
            w3 = hs * A53
            w4 = hs * A54
            for i in range(dim):
                for j in range(dim):
                    ystage[i, j] = (y[i, j] + w1 * kk[0, i, j] + w2 * kk[1, i, j]
                                    + w3 * kk[2, i, j] + w4 * kk[3, i, j])
            _rhs(t + C5 * hs, ystage, kk[4], dim, indptr, indices, g_static, gbuf,
                 term_codes, term_params, term_data, ch_rowptr, ch_indices,
                 ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
            w1 = hs * A61
            w2 = hs * A62
            w3 = hs * A63
            w4 = hs * A64
            w5 = hs * A65
            for i in range(dim):
                for j in range(dim):
                    ystage[i, j] = (y[i, j] + w1 * kk[0, i, j] + w2 * kk[1, i, j]
                                    + w3 * kk[2, i, j] + w4 * kk[3, i, j]
                                    + w5 * kk[4, i, j])
            _rhs(t + hs, ystage, kk[5], dim, indptr, indices, g_static, gbuf,
                 term_codes, term_params, term_data, ch_rowptr, ch_indices,
                 ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
            w1 = hs * B1
            w3 = hs * B3
            w4 = hs * B4
            w5 = hs * B5
            w6 = hs * B6
            for i in range(dim):
                for j in range(dim):
                    ynew[i, j] = (y[i, j] + w1 * kk[0, i, j] + w3 * kk[2, i, j]
                                  + w4 * kk[3, i, j] + w5 * kk[4, i, j]
                                  + w6 * kk[5, i, j])
            _rhs(t + hs, ynew, kk[6], dim, indptr, indices, g_static, gbuf,
                 term_codes, term_params, term_data, ch_rowptr, ch_indices,
                 ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
            nrhs += 6

            w1 = hs * E1
            w3 = hs * E3
            w4 = hs * E4
            w5 = hs * E5
            w6 = hs * E6
            w7 = hs * E7
            e2 = 0.0
            for i in range(dim):
                for j in range(dim):
                    ev = (w1 * kk[0, i, j] + w3 * kk[2, i, j] + w4 * kk[3, i, j]
                          + w5 * kk[4, i, j] + w6 * kk[5, i, j] + w7 * kk[6, i, j])
                    ay = cabs(y[i, j])
                    ayn = cabs(ynew[i, j])
                    sc = abs_tol + rel_tol * (ay if ay > ayn else ayn)
                    sc = cabs(ev) / sc
                    e2 += sc * sc
            enorm = sqrt(e2 / nn)
            if not isfinite(enorm):
                status = 3
                break

            if enorm <= 1.0:
                t += hs
                for i in range(dim):
                    for j in range(dim):
                        y[i, j] = ynew[i, j]
                if hermitize:
                    for i in range(dim):
                        y[i, i] = creal(y[i, i])
                        for j in range(i + 1, dim):
                            avg = 0.5 * (y[i, j] + conj(y[j, i]))
                            y[i, j] = avg
                            y[j, i] = conj(avg)
                # symmetrization moved y off the FSAL point; restart the stage
                _rhs(t, y, kk[0], dim, indptr, indices, g_static, gbuf,
                     term_codes, term_params, term_data, ch_rowptr, ch_indices,
                     ch_data, ch_offsets, ch_nzrows, ch_nzoffsets, tbuf)
                nrhs += 1
                nsteps += 1
            else:
                nrej += 1

            if enorm > 0.0:
                fac = 0.9 * enorm ** -0.2
                if fac < 0.2:
                    fac = 0.2
                elif fac > 5.0:
                    fac = 5.0
            else:
                fac = 5.0
            h = h * fac
            if h > max_step:
                h = max_step
            if nsteps + nrej > max_steps:
                status = 1
                break

    return y_arr, nsteps, nrhs, nrej, status
