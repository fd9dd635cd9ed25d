"""Dissipation channels and master-equation integration.

Density matrices evolve under
    drho/dt = -i[H, rho] + sum_k (rate_k/2) (2 c_k rho c_k+ - {c_k+ c_k, rho})
so a channel's ``rate`` is exactly the decay rate of the population the jump
operator drains (one channel |g><r| with rate y empties rho_rr as e^{-y t}).

Internally the right-hand side is evaluated as
    G rho + (G rho)+ + sum_k  ct_k rho ct_k+,   G = -iH - 1/2 sum ct+ct,
with ct = sqrt(rate) c, valid because every integrator stage value stays
Hermitian. Segments are compiled to a :class:`PreparedGenerator` (one shared
sparsity pattern, static data, time-dependent coefficient terms, stacked
channel CSR arrays) consumed by the compiled core or its numpy twin.

Angular-frequency units are rad/us, times us, rates 1/us throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .levels import Basis, LevelScheme, OperatorMatrix, embed, collective

__all__ = [
    "Channel",
    "engineered_decay_channels",
    "natural_decay_channels",
    "dephasing_channels",
    "Method",
    "IntegratorConfig",
    "Term",
    "TERM_GAUSS",
    "TERM_CEXP",
    "TERM_RPOW6",
    "PreparedGenerator",
    "prepare_generator",
    "lindblad_rhs",
    "liouvillian_matrix",
    "evolve",
    "EvolveStats",
]

TWO_PI = 2.0 * math.pi

# Rydberg natural lifetime default (us); the source material never states it.
DEFAULT_RYDBERG_LIFETIME_US = 343.0
P1_BRANCHING = (1.0 / 6.0, 1.0 / 2.0, 1.0 / 3.0)


@dataclass(frozen=True)
class Channel:
    """One Lindblad channel: jump operator, decay rate (1/us), and a label."""

    jump: OperatorMatrix
    rate: float
    label: str = ""

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"channel rate must be >= 0, got {self.rate}")


def engineered_decay_channels(
    basis: Basis, omega_b: float, gamma: float, include_h: bool = False
) -> list[Channel]:
    """Per-atom engineered decay of |r>, rate gamma_eff = omega_b^2 / gamma.

    Branching follows the fast intermediate state: 1/6 to g, 1/2 to e and,
    when ``include_h`` and the scheme has an h level, 1/3 to h. Without
    ``include_h`` the h share is simply dropped (the source equation's
    stand-in for recycling), leaving a total r drain of (2/3) gamma_eff.
    """
    if omega_b < 0 or gamma <= 0:
        raise ValueError("need omega_b >= 0 and gamma > 0")
    gamma_eff = omega_b * omega_b / gamma
    branches = [("g", gamma_eff * P1_BRANCHING[0]), ("e", gamma_eff * P1_BRANCHING[1])]
    if include_h:
        if "h" not in basis.scheme.levels:
            raise ValueError("include_h requires a scheme with an h level")
        branches.append(("h", gamma_eff * P1_BRANCHING[2]))
    out = []
    for j in range(basis.n_atoms):
        for lab, rate in branches:
            out.append(
                Channel(embed(basis, j, {(lab, "r"): 1.0}), rate, f"eng:{lab}<r:{j}")
            )
    return out


def natural_decay_channels(
    basis: Basis,
    gamma_p1: float,
    p1_branching: tuple[float, float, float] = P1_BRANCHING,
    gamma_r: float = 1.0 / DEFAULT_RYDBERG_LIFETIME_US,
    r_branching: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
    gamma_p2: float = 0.0,
    p2_branching: tuple[float, float, float] = P1_BRANCHING,
) -> list[Channel]:
    """Spontaneous decay of p1 (to g, e, h), of r, and optionally of p2.

    Branching fractions are taken of the given total widths; entries for
    levels the scheme lacks must be zero. p1/p2 channels are emitted only
    for schemes containing those levels. gamma_p2 defaults to 0 so the
    upper intermediate is lossless unless requested.
    """
    out = []
    levels = basis.scheme.levels
    specs = []
    if "p1" in levels:
        specs.append(("p1", gamma_p1, p1_branching))
    elif gamma_p1 not in (0, 0.0):
        raise ValueError("gamma_p1 > 0 but scheme has no p1 level")
    if "p2" in levels:
        specs.append(("p2", gamma_p2, p2_branching))
    elif gamma_p2 not in (0, 0.0):
        raise ValueError("gamma_p2 > 0 but scheme has no p2 level")
    specs.append(("r", gamma_r, r_branching))
    for src, total, branching in specs:
        if total == 0:
            continue
        for lab, frac in zip(("g", "e", "h"), branching):
            if frac == 0:
                continue
            if lab not in levels:
                raise ValueError(f"branching to {lab!r} but scheme has no such level")
            for j in range(basis.n_atoms):
                out.append(
                    Channel(
                        embed(basis, j, {(lab, src): 1.0}),
                        total * frac,
                        f"nat:{lab}<{src}:{j}",
                    )
                )
    return out


def dephasing_channels(
    basis: Basis, gamma_g: float, gamma_e: float, gamma_p: float
) -> list[Channel]:
    """Collective laser-phase-noise channels for the six-level tier.

    Each is a single collective Hermitian operator applied with unit channel
    rate; the noise strength sits inside the operator as sqrt(gamma/2):
        L_g = sqrt(g_g/2) sum_j (|p2><p2| - |g><g|)_j
        L_e = sqrt(g_e/2) sum_j (|p2><p2| - |e><e|)_j
        L_p = sqrt(g_p/2) sum_j (|r><r|  - |p2><p2|)_j
    """
    if basis.scheme is not LevelScheme.FULL_SIX:
        raise ValueError("dephasing channels are defined on the FULL_SIX scheme")
    out = []
    for name, gam, pair in (
        ("deph:g", gamma_g, (("p2", "p2"), ("g", "g"))),
        ("deph:e", gamma_e, (("p2", "p2"), ("e", "e"))),
        ("deph:p", gamma_p, (("r", "r"), ("p2", "p2"))),
    ):
        if gam < 0:
            raise ValueError("dephasing rates must be >= 0")
        if gam == 0:
            continue
        (up, _), (dn, _) = pair
        op = collective(basis, {pair[0]: 1.0, pair[1]: -1.0})
        out.append(Channel(math.sqrt(gam / 2.0) * op, 1.0, name))
    return out


class Method(Enum):
    RK45_ADAPTIVE = "rk45"
    RK4_FIXED = "rk4"


# max_step <= 2*pi / (MAX_STEP_FACTOR * omega_max): pulse areas stay accurate
# to ~1e-4 rad over tens of cycles.
MAX_STEP_FACTOR = 50.0


@dataclass(frozen=True)
class IntegratorConfig:
    method: Method = Method.RK45_ADAPTIVE
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float | None = None  # us; None -> 2pi/(50 omega_max) per segment
    fixed_step: float | None = None  # us; RK4 only, also capped by max_step
    max_steps: int = 80_000_000
    hermitize: bool = True

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_step is not None and self.max_step <= 0:
            raise ValueError("max_step must be positive when given")

    def resolve_max_step(self, omega_max: float) -> float:
        cap = TWO_PI / (MAX_STEP_FACTOR * omega_max) if omega_max > 0 else math.inf
        if self.max_step is not None:
            if self.max_step > cap * (1 + 1e-12):
                raise ValueError(
                    f"max_step {self.max_step:g} us exceeds 2pi/(50*omega_max) = {cap:g} us"
                )
            return self.max_step
        return cap


TERM_GAUSS = 1  # coeff = exp(-(t-p1)^2 / (2 p0^2)); amplitude folded into data
TERM_CEXP = 2  # coeff = exp(i p0 t); complex amplitude folded into data
TERM_RPOW6 = 3  # coeff = p0 / (p1 + p2 t + p3 t^2)^3


@dataclass(frozen=True)
class Term:
    """One time-dependent contribution c(t) * B to the Hamiltonian.

    ``op`` is the operator B with any constant amplitude (including phase)
    already folded in; ``code``/``params`` pick the scalar c(t). Non-real
    coefficients need an explicitly supplied Hermitian-conjugate partner
    term; real ones may fold B + B+ into a single op.
    """

    code: int
    params: tuple[float, float, float, float]
    op: sp.csr_matrix

    def peak(self, duration: float) -> float:
        """max |c(t)| over [0, duration], used for the step-size cap."""
        if self.code == TERM_GAUSS:
            return 1.0
        if self.code == TERM_CEXP:
            return 1.0
        if self.code == TERM_RPOW6:
            p0, a, b, c = self.params
            cands = [a, a + b * duration + c * duration * duration]
            if c > 0 and 0 < -b / (2 * c) < duration:
                tm = -b / (2 * c)
                cands.append(a + b * tm + c * tm * tm)
            r2min = min(cands)
            if r2min <= 0:
                raise ValueError("pair distance reaches zero inside segment")
            return abs(p0) / r2min**3
        raise ValueError(f"unknown term code {self.code}")

    def value(self, t: float) -> complex:
        p0, p1, p2, p3 = self.params
        if self.code == TERM_GAUSS:
            x = (t - p1) / p0
            return math.exp(-0.5 * x * x)
        if self.code == TERM_CEXP:
            return complex(math.cos(p0 * t), math.sin(p0 * t))
        if self.code == TERM_RPOW6:
            return p0 / (p1 + p2 * t + p3 * t * t) ** 3
        raise ValueError(f"unknown term code {self.code}")


@dataclass
class PreparedGenerator:
    """Flattened arrays for one integration segment (shared CSR pattern)."""

    dim: int
    duration: float
    indptr: np.ndarray  # int64[dim+1]
    indices: np.ndarray  # int64[nnz]
    g_static: np.ndarray  # complex128[nnz]
    term_codes: np.ndarray  # int64[K]
    term_params: np.ndarray  # float64[K,4]
    term_data: np.ndarray  # complex128[K,nnz]
    ch_rowptr: np.ndarray  # int64[C, dim+1] (local)
    ch_indices: np.ndarray  # int64[sum nnz_c]
    ch_data: np.ndarray  # complex128[sum nnz_c], sqrt(rate) folded
    ch_offsets: np.ndarray  # int64[C+1]
    ch_nzrows: np.ndarray  # int64[sum rows_c]
    ch_nzoffsets: np.ndarray  # int64[C+1]
    omega_max: float
    max_step: float
    terms: list[Term] = field(default_factory=list)

    @property
    def n_channels(self) -> int:
        return len(self.ch_offsets) - 1


def _union_pattern(mats: list[sp.csr_matrix], dim: int):
    """Union sparsity pattern of the given matrices, sorted indices."""
    if not mats:
        empty = sp.csr_matrix((dim, dim), dtype=np.complex128)
        return empty.indptr.astype(np.int64), empty.indices.astype(np.int64)
    acc = None
    for m in mats:
        shell = sp.csr_matrix(
            (np.ones(m.nnz, dtype=np.float64), m.indices.copy(), m.indptr.copy()),
            shape=(dim, dim),
        )
        acc = shell if acc is None else acc + shell
    acc.sum_duplicates()
    acc.sort_indices()
    return acc.indptr.astype(np.int64), acc.indices.astype(np.int64)


def _spread(mat: sp.csr_matrix, indptr, indices) -> np.ndarray:
    """Data of ``mat`` re-expressed on the union pattern."""
    out = np.zeros(len(indices), dtype=np.complex128)
    mat = mat.tocsr()
    mat.sort_indices()
    for row in range(mat.shape[0]):
        lo, hi = mat.indptr[row], mat.indptr[row + 1]
        if lo == hi:
            continue
        ulo, uhi = indptr[row], indptr[row + 1]
        pos = np.searchsorted(indices[ulo:uhi], mat.indices[lo:hi]) + ulo
        out[pos] += mat.data[lo:hi]
    return out


def prepare_generator(
    basis: Basis,
    h_static: OperatorMatrix | None,
    channels: list[Channel],
    terms: list[Term],
    duration: float,
    cfg: IntegratorConfig,
) -> PreparedGenerator:
    """Compile a segment's generator into backend-ready arrays."""
    dim = basis.dim
    hs = h_static.matrix if h_static is not None else sp.csr_matrix((dim, dim), dtype=complex)
    if h_static is not None and not h_static.is_hermitian(1e-9):
        raise ValueError("static Hamiltonian is not Hermitian")

    scaled = []  # sqrt(rate) * jump
    g_extra = sp.csr_matrix((dim, dim), dtype=np.complex128)
    for ch in channels:
        if ch.jump.basis != basis:
            raise ValueError(f"channel {ch.label!r} built on a different basis")
        ct = math.sqrt(ch.rate) * ch.jump.matrix
        scaled.append(ct.tocsr())
        g_extra = g_extra + (-0.5) * (ct.conj().T @ ct)

    g_mat = (-1j) * hs + g_extra
    pattern_sources = [g_mat.tocsr()] + [t.op.tocsr() for t in terms]
    indptr, indices = _union_pattern(pattern_sources, dim)
    g_static = _spread(g_mat.tocsr(), indptr, indices)

    K = len(terms)
    term_codes = np.array([t.code for t in terms], dtype=np.int64)
    term_params = np.array(
        [t.params for t in terms], dtype=np.float64
    ).reshape(K, 4) if K else np.zeros((0, 4))
    term_data = np.zeros((K, len(indices)), dtype=np.complex128)
    for k, t in enumerate(terms):
        term_data[k] = _spread((-1j) * t.op.tocsr(), indptr, indices)

    # channel stacking
    rowptrs, idx_parts, dat_parts, nz_parts = [], [], [], []
    for ct in scaled:
        ct.sort_indices()
        rowptrs.append(ct.indptr.astype(np.int64))
        idx_parts.append(ct.indices.astype(np.int64))
        dat_parts.append(ct.data.astype(np.complex128))
        nz_parts.append(np.flatnonzero(np.diff(ct.indptr)).astype(np.int64))
    C = len(scaled)
    ch_rowptr = (
        np.vstack(rowptrs) if C else np.zeros((0, dim + 1), dtype=np.int64)
    )
    ch_indices = np.concatenate(idx_parts) if C else np.zeros(0, dtype=np.int64)
    ch_data = np.concatenate(dat_parts) if C else np.zeros(0, dtype=np.complex128)
    ch_offsets = np.zeros(C + 1, dtype=np.int64)
    ch_nzoffsets = np.zeros(C + 1, dtype=np.int64)
    for c in range(C):
        ch_offsets[c + 1] = ch_offsets[c] + len(idx_parts[c])
        ch_nzoffsets[c + 1] = ch_nzoffsets[c] + len(nz_parts[c])
    ch_nzrows = np.concatenate(nz_parts) if C else np.zeros(0, dtype=np.int64)

    # Frequency scale: largest static generator entry plus term peaks plus
    # total channel rate, all in rad/us. Conservative by construction.
    omega = float(np.max(np.abs(g_static))) if len(g_static) else 0.0
    for k, t in enumerate(terms):
        mx = float(np.max(np.abs(term_data[k]))) if term_data.shape[1] else 0.0
        omega += t.peak(duration) * mx
    omega += sum(ch.rate for ch in channels)
    max_step = cfg.resolve_max_step(omega)

    return PreparedGenerator(
        dim=dim,
        duration=duration,
        indptr=indptr,
        indices=indices,
        g_static=g_static,
        term_codes=term_codes,
        term_params=term_params,
        term_data=term_data,
        ch_rowptr=ch_rowptr,
        ch_indices=ch_indices,
        ch_data=ch_data,
        ch_offsets=ch_offsets,
        ch_nzrows=ch_nzrows,
        ch_nzoffsets=ch_nzoffsets,
        omega_max=omega,
        max_step=max_step,
        terms=list(terms),
    )


def lindblad_rhs(rho: np.ndarray, hamiltonian, channels: list[Channel]) -> np.ndarray:
    """Reference right-hand side, written directly from the master equation.

    Used by tests and the generic-callable path of :func:`evolve`; the
    backends implement the same map through the folded-generator form.
    """
    h = hamiltonian.matrix if hasattr(hamiltonian, "matrix") else hamiltonian
    out = -1j * (h @ rho - rho @ h)
    for ch in channels:
        c = ch.jump.matrix
        cd = c.conj().T
        cdc = (cd @ c).tocsr()
        out = out + ch.rate * (c @ rho @ cd) - (ch.rate / 2.0) * (cdc @ rho + rho @ cdc)
    return np.asarray(out)


def liouvillian_matrix(hamiltonian, channels: list[Channel], dim: int) -> np.ndarray:
    """Dense column-stacking superoperator; independent oracle for evolve."""
    h = hamiltonian.matrix if hasattr(hamiltonian, "matrix") else hamiltonian
    h = sp.csr_matrix(h)
    eye = sp.identity(dim, format="csr", dtype=np.complex128)
    L = -1j * (sp.kron(eye, h) - sp.kron(h.T, eye))
    for ch in channels:
        c = sp.csr_matrix(ch.jump.matrix)
        cd = c.conj().T
        cdc = cd @ c
        L = L + ch.rate * (
            sp.kron(c.conj(), c) - 0.5 * sp.kron(eye, cdc) - 0.5 * sp.kron(cdc.T, eye)
        )
    return np.asarray(L.todense())


@dataclass
class EvolveStats:
    steps: int = 0
    rhs_evals: int = 0
    rejected: int = 0
    status: int = 0  # 0 ok, 1 max_steps hit, 3 stepsize underflow / non-finite

    def merge(self, other: "EvolveStats"):
        self.steps += other.steps
        self.rhs_evals += other.rhs_evals
        self.rejected += other.rejected
        self.status = max(self.status, other.status)


class NumericsError(RuntimeError):
    pass


def evolve(
    rho0: np.ndarray,
    hamiltonian,
    channels: list[Channel],
    duration: float,
    cfg: IntegratorConfig | None = None,
    basis: Basis | None = None,
) -> tuple[np.ndarray, EvolveStats]:
    """Propagate a density matrix for ``duration`` (us).

    ``hamiltonian`` may be an OperatorMatrix (fast compiled path), None
    (dissipation only), or a callable t -> OperatorMatrix (generic reference
    path, pure Python). Channels are constant in all cases.
    """
    cfg = cfg or IntegratorConfig()
    rho = np.array(rho0, dtype=np.complex128, order="C")
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("rho must be square")
    if duration < 0:
        raise ValueError("duration must be >= 0")
    if duration == 0:
        return rho, EvolveStats()

    if callable(hamiltonian) and not isinstance(hamiltonian, OperatorMatrix):
        return _evolve_callable(rho, hamiltonian, channels, duration, cfg)

    if basis is None:
        if isinstance(hamiltonian, OperatorMatrix):
            basis = hamiltonian.basis
        elif channels:
            basis = channels[0].jump.basis
        else:
            raise ValueError("need a basis when neither H nor channels are given")
    prep = prepare_generator(basis, hamiltonian, channels, [], duration, cfg)
    from . import backend

    return backend.integrate(prep, rho, cfg)


def _evolve_callable(rho, h_of_t, channels, duration, cfg) -> tuple[np.ndarray, EvolveStats]:
    """Adaptive RK45 on an arbitrary H(t) callable. Not performance-critical."""
    from ._rk import DP_A, DP_B, DP_C, DP_E  # shared tableau

    def rhs(t, y):
        return lindblad_rhs(y, h_of_t(t), channels)

    stats = EvolveStats()
    t, h = 0.0, duration / 100.0
    max_step = cfg.max_step if cfg.max_step is not None else duration / 50.0
    h = min(h, max_step)
    y = rho
    k = [None] * 7
    k[0] = rhs(0.0, y)
    stats.rhs_evals += 1
    while t < duration * (1 - 1e-15):
        h = min(h, duration - t, max_step)
        if h < duration * 1e-14:
            stats.status = 3
            raise NumericsError("step size underflow in callable-H evolve")
        for i in range(1, 7):
            yi = y.copy()
            for j in range(i):
                a = DP_A[i][j]
                if a:
                    yi += (h * a) * k[j]
            k[i] = rhs(t + DP_C[i] * h, yi)
            stats.rhs_evals += 1
        ynew = y.copy()
        for j in range(7):
            if DP_B[j]:
                ynew += (h * DP_B[j]) * k[j]
        err = np.zeros_like(y)
        for j in range(7):
            if DP_E[j]:
                err += (h * DP_E[j]) * k[j]
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(ynew))
        enorm = float(np.sqrt(np.mean(np.abs(err / scale) ** 2)))
        if not math.isfinite(enorm):
            stats.status = 3
            raise NumericsError("non-finite error norm in callable-H evolve")
        if enorm <= 1.0:
            t += h
            y = ynew
            if cfg.hermitize:
                y = 0.5 * (y + y.conj().T)
            k[0] = rhs(t, y)  # no FSAL reuse after hermitization
            stats.rhs_evals += 1
            stats.steps += 1
        else:
            stats.rejected += 1
        fac = 0.9 * enorm ** -0.2 if enorm > 0 else 5.0
        h *= min(5.0, max(0.2, fac))
        if stats.steps + stats.rejected > cfg.max_steps:
            stats.status = 1
            raise NumericsError("max step count exceeded in callable-H evolve")
    return y, stats
