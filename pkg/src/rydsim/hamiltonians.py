"""Drive, interaction, microwave and two-photon-ladder Hamiltonians.

Unit conventions (used across the package): angular frequencies in rad/us,
times in us, lengths in um. A laser quoted as "2 MHz" enters as 2*pi*2 rad/us.

Frame convention: drives are written in the frame rotating with each laser,
so a detuned drive carries a static -delta |r><r| diagonal instead of an
oscillating phase. The oscillating form is available through
``drive_hamiltonian(..., oscillating=True)`` for frame-equivalence checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .levels import Basis, LevelScheme, OperatorMatrix, collective, embed
from .lindblad import TERM_CEXP, TERM_GAUSS, Term


class DriveSource(Enum):
    """Which ground-manifold level the two-photon drive couples to r."""

    G = "g"
    E = "e"
    PLUS = "plus"  # both legs driven; |+> = (|g>+|e>)/sqrt(2) couples, |-> is dark


class EnvelopeKind(Enum):
    SQUARE = "square"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class Envelope:
    kind: EnvelopeKind = EnvelopeKind.SQUARE
    sigma: float = 0.0  # us; Gaussian width
    center: float | None = None  # us; defaults to 3*sigma

    def __post_init__(self):
        if self.kind is EnvelopeKind.GAUSSIAN:
            if self.sigma <= 0:
                raise ValueError("gaussian envelope needs sigma > 0")
            if self.center is None:
                object.__setattr__(self, "center", 3.0 * self.sigma)

    def value(self, t: float) -> float:
        if self.kind is EnvelopeKind.SQUARE:
            return 1.0
        x = (t - self.center) / self.sigma
        return math.exp(-0.5 * x * x)


SQUARE = Envelope(EnvelopeKind.SQUARE)


def gaussian_envelope(sigma: float) -> Envelope:
    return Envelope(EnvelopeKind.GAUSSIAN, sigma)


@dataclass(frozen=True)
class DriveSpec:
    """One global two-photon drive.

    ``rabi`` is the amplitude of the driven transition: Omega_a for G/E,
    sqrt(2)*Omega_a for PLUS (the |+> <-> |r> amplitude; each of the g and e
    legs then runs at Omega_a). ``phases``/``phase_rates`` hold per-atom
    laser phases phi_j + kappa_j*t in rad and rad/us.
    """

    source: DriveSource
    rabi: float
    detuning: float = 0.0
    envelope: Envelope = SQUARE
    phases: tuple[float, ...] | None = None
    phase_rates: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.rabi <= 0:
            raise ValueError("rabi must be > 0")

    def _leg_entries(self) -> dict[str, float]:
        # per-leg amplitude prefactors relative to self.rabi
        if self.source is DriveSource.G:
            return {"g": 1.0}
        if self.source is DriveSource.E:
            return {"e": 1.0}
        return {"g": 1.0 / math.sqrt(2.0), "e": 1.0 / math.sqrt(2.0)}

    def atom_phase(self, j: int) -> float:
        return self.phases[j] if self.phases else 0.0

    def atom_phase_rate(self, j: int) -> float:
        return self.phase_rates[j] if self.phase_rates else 0.0


@dataclass(frozen=True)
class InteractionSpec:
    """Rydberg pair interaction: uniform U, explicit pair map, or C6 law.

    ``c6`` in rad/us*um^6 with positions in um gives U_ij = -c6/|r_i-r_j|^6.
    """

    uniform: float | None = None
    pairs: tuple[tuple[tuple[int, int], float], ...] | None = None
    c6: float | None = None
    positions: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self):
        given = [
            self.uniform is not None,
            self.pairs is not None,
            self.c6 is not None,
        ]
        if sum(given) != 1:
            raise ValueError("specify exactly one of uniform, pairs, c6")
        if self.c6 is not None and self.positions is None:
            raise ValueError("c6 interaction needs positions")

    def pair_strengths(self, n_atoms: int) -> dict[tuple[int, int], float]:
        if self.uniform is not None:
            return {
                (i, j): self.uniform
                for i in range(n_atoms)
                for j in range(i + 1, n_atoms)
            }
        if self.pairs is not None:
            out = {}
            for (i, j), u in self.pairs:
                key = (min(i, j), max(i, j))
                if key in out and out[key] != u:
                    raise ValueError(f"conflicting strengths for pair {key}")
                out[key] = u
            return out
        out = {}
        for i in range(n_atoms):
            for j in range(i + 1, n_atoms):
                d = math.dist(self.positions[i], self.positions[j])
                if d <= 0:
                    raise ValueError(f"atoms {i},{j} coincide")
                out[(i, j)] = -self.c6 / d**6
        return out


@dataclass(frozen=True)
class FullLadderSpec:
    """Two-photon ladder s -> p2 -> r kept explicit (FULL_SIX tier).

    ``omega_lower`` couples the ground-manifold level(s) to p2,
    ``omega_upper`` couples p2 to r, ``delta_mid`` is the intermediate-state
    detuning carried by p2. ``omega_b`` drives r <-> p1 during relaxation.
    """

    omega_lower: float
    omega_upper: float
    delta_mid: float
    omega_b: float
    source: DriveSource = DriveSource.G

    def __post_init__(self):
        if self.delta_mid == 0:
            raise ValueError("delta_mid must be nonzero")
        if self.delta_mid < 10.0 * max(self.omega_lower, self.omega_upper):
            import warnings

            warnings.warn(
                "intermediate detuning below 10x Rabi; adiabatic elimination "
                "of p2 is marginal",
                stacklevel=2,
            )

    @property
    def effective_rabi(self) -> float:
        return self.omega_lower * self.omega_upper / (2.0 * self.delta_mid)


def _source_levels(basis: Basis, source: DriveSource) -> None:
    need = {"r"}
    if source is DriveSource.G:
        need.add("g")
    elif source is DriveSource.E:
        need.add("e")
    else:
        need.update(("g", "e"))
    missing = need - set(basis.scheme.levels)
    if missing:
        raise ValueError(f"scheme {basis.scheme.name} lacks levels {sorted(missing)}")


def drive_coupling(spec: DriveSpec, basis: Basis, t: float = 0.0) -> OperatorMatrix:
    """Raising+lowering part of the drive, amplitude evaluated at time t."""
    _source_levels(basis, spec.source)
    env = spec.envelope.value(t)
    legs = spec._leg_entries()
    op = None
    for j in range(basis.n_atoms):
        phase = spec.atom_phase(j) + spec.atom_phase_rate(j) * t
        amp = 0.5 * spec.rabi * env * complex(math.cos(phase), math.sin(phase))
        entries = {("r", s): amp * w for s, w in legs.items()}
        entries.update({(s, "r"): np.conj(amp) * w for s, w in legs.items()})
        term = embed(basis, j, entries)
        op = term if op is None else op + term
    return op


def detuning_shift(basis: Basis, detuning: float) -> OperatorMatrix:
    """Static rotated-frame term -delta * sum_j |r>_j<r|."""
    return collective(basis, {("r", "r"): -detuning})


def drive_hamiltonian(
    spec: DriveSpec, basis: Basis, t: float = 0.0, oscillating: bool = False
) -> OperatorMatrix:
    """Full drive Hamiltonian at time t.

    Static frame (default): coupling(t) - delta*sum|r><r|. With
    ``oscillating=True`` the detuning rides on the coupling phase
    e^{i*delta*t} instead and no diagonal appears; both give identical
    populations.
    """
    if oscillating:
        # raising entries |r><s| sit strictly below the diagonal (r is the
        # last level of every scheme); they pick up e^{-i*delta*t}
        rot = complex(math.cos(spec.detuning * t), -math.sin(spec.detuning * t))
        raising = _strict_lower(drive_coupling(spec, basis, t))
        osc = raising * rot
        return osc + osc.dag()
    h = drive_coupling(spec, basis, t)
    if spec.detuning != 0.0:
        h = h + detuning_shift(basis, spec.detuning)
    return h


def _strict_lower(op: OperatorMatrix) -> OperatorMatrix:
    import scipy.sparse as sp

    m = sp.tril(op.matrix, k=-1, format="csr")
    return OperatorMatrix(op.basis, m)


def rydberg_interaction(spec: InteractionSpec, basis: Basis) -> OperatorMatrix:
    """Diagonal sum_{i<j} U_ij on states with atoms i and j both in r."""
    strengths = spec.pair_strengths(basis.n_atoms)
    dim = basis.dim
    diag = np.zeros(dim)
    r_idx = basis.scheme.index("r")
    for state_index, labels in enumerate(basis.states()):
        occupied = [j for j, lab in enumerate(labels) if lab == "r"]
        for a in range(len(occupied)):
            for b in range(a + 1, len(occupied)):
                diag[state_index] += strengths[(occupied[a], occupied[b])]
    import scipy.sparse as sp

    return OperatorMatrix(basis, sp.diags(diag, format="csr", dtype=np.complex128))


def microwave_hamiltonian(rabi: float, basis: Basis) -> OperatorMatrix:
    """(Omega_c/2) * sum_j (|e>_j<g| + |h>_j<g|) + h.c."""
    if "h" not in basis.scheme.levels:
        raise ValueError("microwave mixing needs the h level")
    amp = 0.5 * rabi
    return collective(
        basis, {("e", "g"): amp, ("h", "g"): amp, ("g", "e"): amp, ("g", "h"): amp}
    )


def blockade_effective_hamiltonian(omega_a: float, basis: Basis) -> OperatorMatrix:
    """Hard-blockade two-atom step-A generator (no double excitation)."""
    if basis.n_atoms != 2:
        raise ValueError("effective blockade model is two-atom")
    amp = 0.5 * omega_a
    pairs = [
        (("e", "r"), ("e", "g")),
        (("r", "e"), ("g", "e")),
        (("r", "g"), ("g", "g")),
        (("g", "r"), ("g", "g")),
    ]
    import scipy.sparse as sp

    dim = basis.dim
    m = sp.lil_matrix((dim, dim), dtype=np.complex128)
    for bra, ket in pairs:
        i, j = basis.encode(bra), basis.encode(ket)
        m[i, j] += amp
        m[j, i] += amp
    return OperatorMatrix(basis, m.tocsr())


def full_ladder_hamiltonian(
    spec: FullLadderSpec,
    basis: Basis,
    segment: str,
    interaction: InteractionSpec | None = None,
    detuning: float = 0.0,
) -> OperatorMatrix:
    """FULL_SIX pulse/relax Hamiltonians with p2 kept explicit.

    pulse: sum_j [delta_mid|p2><p2| + (omega_lower/2)|p2><s| +
    (omega_upper/2)|r><p2| + h.c.] + interaction - detuning*sum|r><r|.
    relax: sum_j (omega_b/2)(|p1><r| + h.c.).
    """
    if basis.scheme is not LevelScheme.FULL_SIX:
        raise ValueError("ladder Hamiltonian needs the FULL_SIX scheme")
    if segment == "relax":
        if spec.omega_b == 0.0:
            import scipy.sparse as sp

            return OperatorMatrix(
                basis, sp.csr_matrix((basis.dim, basis.dim), dtype=np.complex128)
            )
        amp = 0.5 * spec.omega_b
        return collective(basis, {("p1", "r"): amp, ("r", "p1"): amp})
    if segment != "pulse":
        raise ValueError("segment must be 'pulse' or 'relax'")

    lower = 0.5 * spec.omega_lower
    upper = 0.5 * spec.omega_upper
    entries: dict[tuple[str, str], complex] = {
        ("p2", "p2"): spec.delta_mid,
        ("r", "p2"): upper,
        ("p2", "r"): upper,
    }
    if spec.source in (DriveSource.G, DriveSource.PLUS):
        entries[("p2", "g")] = lower
        entries[("g", "p2")] = lower
    if spec.source in (DriveSource.E, DriveSource.PLUS):
        entries[("p2", "e")] = lower
        entries[("e", "p2")] = lower
    h = collective(basis, entries)
    if detuning != 0.0:
        h = h + detuning_shift(basis, detuning)
    if interaction is not None:
        h = h + rydberg_interaction(interaction, basis)
    return h


def drive_prepared(
    spec: DriveSpec, basis: Basis, duration: float
) -> tuple[OperatorMatrix | None, list[Term]]:
    """Split a drive into a static operator plus integrator terms.

    Square drives with static phases are fully static. Gaussian envelopes
    become one gaussian-coefficient term; per-atom phase rates become one
    e^{i*kappa*t} term per atom plus its conjugate partner. Gaussian
    envelopes cannot be combined with phase rates (never needed: the motion
    studies run square pulses).
    """
    _source_levels(basis, spec.source)
    gaussian = spec.envelope.kind is EnvelopeKind.GAUSSIAN
    moving = spec.phase_rates is not None and any(
        k != 0.0 for k in spec.phase_rates
    )
    if gaussian and moving:
        raise ValueError("gaussian envelope with drifting phases unsupported")

    static = None
    if spec.detuning != 0.0:
        static = detuning_shift(basis, spec.detuning)

    if not gaussian and not moving:
        coup = drive_coupling(spec, basis, 0.0)
        static = coup if static is None else static + coup
        return static, []

    terms: list[Term] = []
    if gaussian:
        coup = drive_coupling(spec, basis, spec.envelope.center)
        terms.append(
            Term(
                TERM_GAUSS,
                (spec.envelope.sigma, spec.envelope.center, 0.0, 0.0),
                coup.matrix,
            )
        )
        return static, terms

    legs = spec._leg_entries()
    for j in range(basis.n_atoms):
        phase = spec.atom_phase(j)
        amp = 0.5 * spec.rabi * complex(math.cos(phase), math.sin(phase))
        up = embed(basis, j, {("r", s): amp * w for s, w in legs.items()})
        down = embed(basis, j, {(s, "r"): np.conj(amp) * w for s, w in legs.items()})
        kappa = spec.atom_phase_rate(j)
        terms.append(Term(TERM_CEXP, (kappa, 0.0, 0.0, 0.0), up.matrix))
        terms.append(Term(TERM_CEXP, (-kappa, 0.0, 0.0, 0.0), down.matrix))
    return static, terms
