"""Target entangled states, reference amplitudes, and initial-state builders.

The closed forms here are deliberately independent of the integrator so they
can serve as oracles in tests: populations of protocol fixed points, the
survival amplitude of symmetric +-states under the step-C drive, and the
microwave dark states.
"""

from __future__ import annotations

import itertools
import math
import warnings
from enum import Enum

import numpy as np

from .levels import Basis, LevelScheme

__all__ = [
    "TargetKind",
    "target_state",
    "x_state",
    "ghz_state",
    "survival_amplitude",
    "population",
    "InitialStateKind",
    "initial_state",
    "dark_state_residual",
]

_SQ2 = math.sqrt(2.0)


class TargetKind(Enum):
    BELL_PHI_PLUS = "phi_plus"
    BELL_PHI_MINUS = "phi_minus"
    BELL_PSI_PLUS = "psi_plus"
    BELL_PSI_MINUS = "psi_minus"
    QUTRIT_T1 = "T1"
    QUTRIT_T2 = "T2"
    QUTRIT_T3 = "T3"
    GHZ = "ghz"


def _ket(basis: Basis, *terms) -> np.ndarray:
    v = np.zeros(basis.dim, dtype=np.complex128)
    for coeff, labels in terms:
        v[basis.encode(labels)] += coeff
    n = np.linalg.norm(v)
    return v / n


def ghz_state(basis: Basis) -> np.ndarray:
    """(|g...g> + (-1)^n |e...e>)/sqrt(2).

    The sign alternates with atom number so that the +/- basis expansion
    contains only even numbers of + atoms; that is the combination the
    pulsed cycle leaves invariant.
    """
    n = basis.n_atoms
    return _ket(basis, (1.0, "g" * n), ((-1.0) ** n, "e" * n))


def target_state(basis: Basis, kind: TargetKind) -> np.ndarray:
    """Normalized target state vector in the given basis."""
    k = TargetKind(kind)
    if k in (
        TargetKind.BELL_PHI_PLUS,
        TargetKind.BELL_PHI_MINUS,
        TargetKind.BELL_PSI_PLUS,
        TargetKind.BELL_PSI_MINUS,
    ):
        if basis.n_atoms != 2:
            raise ValueError("Bell targets need exactly 2 atoms")
        sign = 1.0 if k in (TargetKind.BELL_PHI_PLUS, TargetKind.BELL_PSI_PLUS) else -1.0
        if k in (TargetKind.BELL_PHI_PLUS, TargetKind.BELL_PHI_MINUS):
            return _ket(basis, (1.0, "gg"), (sign, "ee"))
        return _ket(basis, (1.0, "eg"), (sign, "ge"))
    if k in (TargetKind.QUTRIT_T1, TargetKind.QUTRIT_T2, TargetKind.QUTRIT_T3):
        if basis.n_atoms != 2:
            raise ValueError("qutrit targets need exactly 2 atoms")
        for lab in ("g", "e", "h"):
            basis.scheme.index(lab)  # raises if the scheme lacks the level
        if k is TargetKind.QUTRIT_T1:
            return _ket(basis, (1.0, "ee"), (-1.0, "gg"), (1.0, "hh"))
        if k is TargetKind.QUTRIT_T2:
            return _ket(basis, (1.0, "eh"), (-1.0, "gg"), (1.0, "he"))
        return _ket(basis, (1.0, "eg"), (-1.0, "ge"), (-1.0, "gh"), (1.0, "hg"))
    if k is TargetKind.GHZ:
        return ghz_state(basis)
    raise ValueError(f"unknown target kind {kind!r}")


def x_state(basis: Basis, m: int) -> np.ndarray:
    """|X_m^n>: normalized symmetric state of m atoms in |+> and n-m in |->,
    with |+-> = (|g> +- |e>)/sqrt(2), expressed in the product basis."""
    n = basis.n_atoms
    if not 0 <= m <= n:
        raise ValueError(f"m must lie in 0..{n}")
    L = basis.scheme.n_levels
    plus = np.zeros(L, dtype=np.complex128)
    minus = np.zeros(L, dtype=np.complex128)
    gi, ei = basis.scheme.index("g"), basis.scheme.index("e")
    plus[gi] = plus[ei] = 1.0 / _SQ2
    minus[gi], minus[ei] = 1.0 / _SQ2, -1.0 / _SQ2
    out = np.zeros(basis.dim, dtype=np.complex128)
    for positions in itertools.combinations(range(n), m):
        term = np.ones(1, dtype=np.complex128)
        for atom in range(n):
            term = np.kron(term, plus if atom in positions else minus)
        out += term
    return out / math.sqrt(math.comb(n, m))


def survival_amplitude(m: int, omega_a: float, delta: float, t: float) -> complex:
    """Amplitude remaining on |X_m^n> after driving |+> -> |r> for time t.

    Closed form for the blockaded two-level reduction {X_m, symmetric single
    excitation}: with W = sqrt(delta^2 + 2 m omega_a^2) and
    P+- = i(-delta +- W)/2, the amplitude is (P+ e^{P+ t} - P- e^{P- t})/(iW).
    m = 0 never couples and returns exactly 1. All arguments in angular units
    (rad/s and s, or any consistent pair).
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    if m == 0:
        return 1.0 + 0.0j
    w = math.sqrt(delta * delta + 2.0 * m * omega_a * omega_a)
    if w == 0.0:
        return 1.0 + 0.0j
    p_plus = 0.5j * (-delta + w)
    p_minus = 0.5j * (-delta - w)
    num = p_plus * np.exp(p_plus * t) - p_minus * np.exp(p_minus * t)
    return complex(num / (1j * w))


def population(rho: np.ndarray, state: np.ndarray) -> float:
    """<psi|rho|psi> as a real number; trips an assertion if rho has drifted
    measurably off Hermitian."""
    val = complex(np.vdot(state, rho @ state))
    if abs(val.imag) > 1e-8:
        raise AssertionError(f"population has imaginary part {val.imag:.3e}")
    return float(val.real)


class InitialStateKind(Enum):
    FULLY_MIXED_GE = "mixed_ge"
    FULLY_MIXED_GEH = "mixed_geh"
    MIX_LIST = "mix_list"


def _mixed_over(basis: Basis, levels: tuple[str, ...]) -> np.ndarray:
    rho = np.zeros((basis.dim, basis.dim), dtype=np.complex128)
    combos = list(itertools.product(levels, repeat=basis.n_atoms))
    w = 1.0 / len(combos)
    for labels in combos:
        i = basis.encode(labels)
        rho[i, i] = w
    return rho


def initial_state(basis: Basis, kind, components=None) -> np.ndarray:
    """Build an initial density matrix.

    FULLY_MIXED_GE / FULLY_MIXED_GEH: uniform diagonal mixture over the
    {g,e} (resp. {g,e,h}) product manifold. MIX_LIST: ``components`` is a
    list of (weight, state) pairs where each state is a label tuple/string
    or an explicit vector; weights are renormalized with a warning if they
    do not sum to 1.
    """
    k = InitialStateKind(kind)
    if k is InitialStateKind.FULLY_MIXED_GE:
        return _mixed_over(basis, ("g", "e"))
    if k is InitialStateKind.FULLY_MIXED_GEH:
        return _mixed_over(basis, ("g", "e", "h"))
    if not components:
        raise ValueError("MIX_LIST needs (weight, state) components")
    total = float(sum(w for w, _ in components))
    if total <= 0:
        raise ValueError("mixture weights must sum to a positive number")
    if abs(total - 1.0) > 1e-9:
        warnings.warn(f"mixture weights sum to {total:g}; renormalizing", stacklevel=2)
    rho = np.zeros((basis.dim, basis.dim), dtype=np.complex128)
    for w, state in components:
        if isinstance(state, (tuple, str)):
            v = basis.basis_vector(state)
        else:
            v = np.asarray(state, dtype=np.complex128)
            nrm = np.linalg.norm(v)
            if nrm == 0:
                raise ValueError("zero state vector in mixture")
            v = v / nrm
        rho += (w / total) * np.outer(v, v.conj())
    return rho


def dark_state_residual(hamiltonian, state: np.ndarray) -> float:
    """|| H |psi> ||_2 — zero iff the state is dark under H."""
    mat = hamiltonian.matrix if hasattr(hamiltonian, "matrix") else hamiltonian
    return float(np.linalg.norm(mat @ state))
