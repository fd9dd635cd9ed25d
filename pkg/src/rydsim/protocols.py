"""Cyclic pulse protocols for dissipative entanglement preparation.

Builders return immutable Protocol values: Bell (pump |gg>, pump |ee>, mix
through |+> with a full-period drive), two-qutrit (amplitude-periodic pumps
plus a global microwave), and n-atom GHZ (collective pumps plus a detuned
mixing pulse whose timing comes from an integer-triple solver). ``run``
integrates a protocol segment by segment, reusing each segment's compiled
generator across cycles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .hamiltonians import (
    SQUARE,
    DriveSource,
    DriveSpec,
    EnvelopeKind,
    FullLadderSpec,
    InteractionSpec,
    drive_hamiltonian,
    drive_prepared,
    full_ladder_hamiltonian,
    gaussian_envelope,
    microwave_hamiltonian,
    rydberg_interaction,
)
from .levels import Basis, LevelScheme, OperatorMatrix, embed
from .lindblad import (
    TERM_CEXP,
    TERM_GAUSS,
    TERM_RPOW6,
    Channel,
    EvolveStats,
    IntegratorConfig,
    NumericsError,
    Term,
    dephasing_channels,
    engineered_decay_channels,
    liouvillian_matrix,
    natural_decay_channels,
    prepare_generator,
)
from .states import population, survival_amplitude

TWO_PI = 2.0 * math.pi
SQRT2 = math.sqrt(2.0)


class SegmentKind(Enum):
    PULSE = "pulse"
    RELAX = "relax"
    MICROWAVE = "microwave"


@dataclass(frozen=True)
class Segment:
    """One leg of a cycle: coherent pulse, dissipative relaxation, or
    microwave mixing. ``hamiltonian`` overrides the drive/interaction pair
    when the generator is not expressible as a single two-photon drive
    (the explicit-ladder tier)."""

    kind: SegmentKind
    duration: float
    label: str
    drive: DriveSpec | None = None
    interaction: InteractionSpec | None = None
    microwave_rabi: float = 0.0
    channels: tuple[Channel, ...] = ()
    hamiltonian: OperatorMatrix | None = None
    extra_terms: tuple[Term, ...] = ()

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("segment duration must be > 0")
        if self.drive is not None and self.hamiltonian is not None:
            raise ValueError("give either a drive spec or an explicit Hamiltonian")
        if (
            self.drive is not None
            and self.drive.envelope.kind is EnvelopeKind.GAUSSIAN
        ):
            sigma = self.drive.envelope.sigma
            if not math.isclose(self.duration, 6.0 * sigma, rel_tol=0.2):
                # perturbation studies stretch this on purpose; only wildly
                # inconsistent values are construction errors
                raise ValueError("gaussian pulse duration should be near 6*sigma")


@dataclass(frozen=True)
class Protocol:
    name: str
    basis: Basis
    segments: tuple[Segment, ...]
    cycles: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cycles < 0:
            raise ValueError("cycles must be >= 0")

    @property
    def cycle_duration(self) -> float:
        return sum(s.duration for s in self.segments)


@dataclass(frozen=True)
class TimingSolution:
    """Detuning/duration pair closing the even-excitation sectors."""

    delta: float
    t: float
    k: int
    l: int
    j: int
    residuals: tuple[float, float, float]


RESONANT = "resonant"


def _materialize(seg: Segment, basis: Basis):
    """Segment -> (static H or None, coefficient terms, channels)."""
    terms: list[Term] = list(seg.extra_terms)
    if seg.hamiltonian is not None:
        return seg.hamiltonian, terms, list(seg.channels)
    if seg.kind is SegmentKind.MICROWAVE:
        return microwave_hamiltonian(seg.microwave_rabi, basis), terms, list(seg.channels)
    if seg.kind is SegmentKind.RELAX or seg.drive is None:
        return None, terms, list(seg.channels)
    static, drive_terms = drive_prepared(seg.drive, basis, seg.duration)
    terms = drive_terms + terms
    if seg.interaction is not None:
        inter = rydberg_interaction(seg.interaction, basis)
        static = inter if static is None else static + inter
    return static, terms, list(seg.channels)


# ---------------------------------------------------------------------------
# protocol builders


def _blockade_check(omega_a: float, u: float):
    if u < 10.0 * omega_a:
        import warnings

        warnings.warn(
            "interaction below 10x the drive; blockade is marginal", stacklevel=3
        )


def bell_protocol(
    omega_a: float = TWO_PI * 2.0,
    omega_b: float = TWO_PI * 1.2,
    gamma: float = TWO_PI * 6.0,
    u: float = TWO_PI * 400.0,
    relax_duration: float = 2.0,
    cycles: int = 20,
) -> Protocol:
    """Three-step Bell cycle on two blockaded atoms.

    Pump pulses last sqrt(2)*pi/omega_a (the |gg> sector completes half a
    population period and flips sign); the mixing pulse lasts a full
    2*pi/omega_a so the doubly-plus sector returns with amplitude +1 while
    singly-plus states are damped.
    """
    _blockade_check(omega_a, u)
    basis = Basis(LevelScheme.REDUCED_GER, 2)
    inter = InteractionSpec(uniform=u)
    relax_channels = tuple(
        engineered_decay_channels(basis, omega_b, gamma, include_h=False)
    )
    tau_pump = SQRT2 * math.pi / omega_a
    tau_mix = TWO_PI / omega_a
    segs = (
        Segment(SegmentKind.PULSE, tau_pump, "A",
                drive=DriveSpec(DriveSource.G, omega_a), interaction=inter),
        Segment(SegmentKind.RELAX, relax_duration, "relax-A", channels=relax_channels),
        Segment(SegmentKind.PULSE, tau_pump, "B",
                drive=DriveSpec(DriveSource.E, omega_a), interaction=inter),
        Segment(SegmentKind.RELAX, relax_duration, "relax-B", channels=relax_channels),
        Segment(SegmentKind.PULSE, tau_mix, "C",
                drive=DriveSpec(DriveSource.PLUS, SQRT2 * omega_a), interaction=inter),
        Segment(SegmentKind.RELAX, relax_duration, "relax-C", channels=relax_channels),
    )
    params = dict(omega_a=omega_a, omega_b=omega_b, gamma=gamma, u=u,
                  relax_duration=relax_duration)
    return Protocol("bell", basis, segs, cycles, params)


def qutrit_protocol(
    omega_a: float = TWO_PI * 2.0,
    omega_b: float = TWO_PI * 1.2,
    gamma: float = TWO_PI * 6.0,
    u: float = TWO_PI * 400.0,
    omega_c: float = TWO_PI * 0.02,
    relax_duration: float = 2.0,
    cycles: int = 60,
) -> Protocol:
    """Two-step qutrit cycle plus microwave mixing on {g, e, h}.

    Pump pulses run a full amplitude period (2*sqrt(2)*pi/omega_a) so the
    doubly-occupied sector returns with amplitude +1 while singly-coupled
    states are damped; the engineered decay feeds h as well. One microwave
    segment of duration 2*pi/(7*omega_c) per cycle funnels the pulse-dark
    manifold {|gg>, |ee>, |hh>} into its unique microwave-dark combination.
    """
    _blockade_check(omega_a, u)
    basis = Basis(LevelScheme.REDUCED_GEHR, 2)
    inter = InteractionSpec(uniform=u)
    relax_channels = tuple(
        engineered_decay_channels(basis, omega_b, gamma, include_h=True)
    )
    tau_pump = 2.0 * SQRT2 * math.pi / omega_a
    tau_mw = TWO_PI / (7.0 * omega_c)
    segs = (
        Segment(SegmentKind.PULSE, tau_pump, "A",
                drive=DriveSpec(DriveSource.G, omega_a), interaction=inter),
        Segment(SegmentKind.RELAX, relax_duration, "relax-A", channels=relax_channels),
        Segment(SegmentKind.PULSE, tau_pump, "B",
                drive=DriveSpec(DriveSource.E, omega_a), interaction=inter),
        Segment(SegmentKind.RELAX, relax_duration, "relax-B", channels=relax_channels),
        Segment(SegmentKind.MICROWAVE, tau_mw, "MW", microwave_rabi=omega_c),
    )
    params = dict(omega_a=omega_a, omega_b=omega_b, gamma=gamma, u=u,
                  omega_c=omega_c, relax_duration=relax_duration)
    return Protocol("qutrit", basis, segs, cycles, params)


def ghz_protocol(
    n: int,
    omega_a: float = TWO_PI * 2.0,
    omega_b: float = TWO_PI * 1.2,
    gamma: float = TWO_PI * 6.0,
    u: float = TWO_PI * 400.0,
    relax_duration: float = 2.0,
    cycles: int = 80,
    timing: TimingSolution | str = RESONANT,
) -> Protocol:
    """n-atom GHZ cycle: collective pumps plus a detuned mixing pulse.

    Pump duration 2*pi/(sqrt(n)*omega_a) flips the all-ground (all-excited)
    sign. For n = 3 the mixing pulse may run resonantly for 2*pi/omega_a;
    for n = 4, 5 both even-plus sectors must close simultaneously, which
    needs the detuned timing from solve_mixing_timing.
    """
    if n < 2 or n > 6:
        raise ValueError("n out of supported range")
    _blockade_check(omega_a, u)
    basis = Basis(LevelScheme.REDUCED_GER, n)
    inter = InteractionSpec(uniform=u)
    relax_channels = tuple(
        engineered_decay_channels(basis, omega_b, gamma, include_h=False)
    )
    if timing == RESONANT:
        if n > 3:
            raise ValueError(
                "resonant mixing cannot close both even sectors for n > 3: "
                "their Rabi frequencies are in the irrational ratio 1:sqrt(2); "
                "pass a TimingSolution"
            )
        delta, tau_mix = 0.0, TWO_PI / omega_a
        timing_fields = dict(delta=0.0, t=tau_mix, k=0, l=0, j=0)
    else:
        delta, tau_mix = timing.delta, timing.t
        timing_fields = dict(delta=timing.delta, t=timing.t, k=timing.k,
                             l=timing.l, j=timing.j)
    tau_pump = TWO_PI / (math.sqrt(n) * omega_a)
    segs = (
        Segment(SegmentKind.PULSE, tau_pump, "A",
                drive=DriveSpec(DriveSource.G, omega_a), interaction=inter),
        Segment(SegmentKind.RELAX, relax_duration, "relax-A", channels=relax_channels),
        Segment(SegmentKind.PULSE, tau_pump, "B",
                drive=DriveSpec(DriveSource.E, omega_a), interaction=inter),
        Segment(SegmentKind.RELAX, relax_duration, "relax-B", channels=relax_channels),
        Segment(SegmentKind.PULSE, tau_mix, "C",
                drive=DriveSpec(DriveSource.PLUS, SQRT2 * omega_a, detuning=delta),
                interaction=inter),
        Segment(SegmentKind.RELAX, relax_duration, "relax-C", channels=relax_channels),
    )
    params = dict(n=n, omega_a=omega_a, omega_b=omega_b, gamma=gamma, u=u,
                  relax_duration=relax_duration, timing=timing_fields)
    return Protocol(f"ghz{n}", basis, segs, cycles, params)


def full_bell_protocol(
    ladder: FullLadderSpec,
    u: float = TWO_PI * 400.0,
    gamma_p1: float = 1.0 / 2.62e-2,
    gamma_r: float = 1.0 / 343.0,
    gamma_p2: float = 1.0 / 0.112,
    relax_duration: float = 2.0,
    cycles: int = 20,
    p1_branching: tuple[float, float, float] = (1.0 / 6.0, 1.0 / 2.0, 1.0 / 3.0),
    recycle_rate: float = 10.0,
    dephasing: tuple[float, float, float] | None = None,
) -> Protocol:
    """Bell cycle on the six-level scheme with the two-photon ladder explicit.

    Natural decay stays on during pulses. Relaxation keeps the r <-> p1
    drive on so the fast p1 decay supplies the engineered emission. The
    short-lived upper intermediate drains at ``gamma_p2`` (with the p1
    branching) during relaxation, clearing the residue an ideal square
    switch-off strands there. Every pulse Hamiltonian carries the
    light-shift compensation that keeps the two-photon transition
    resonant. ``recycle_rate`` > 0 adds per-atom h -> g and h -> e repump
    channels (weights matching the g:e branching) standing in for the
    recycling lasers the scheme assumes; set it to 0 to watch population
    strand in h. ``dephasing`` = (gamma_g, gamma_e, gamma_p) adds the
    collective laser-phase channels during pulses only.
    """
    basis = Basis(LevelScheme.FULL_SIX, 2)
    inter = InteractionSpec(uniform=u)
    omega_eff = ladder.effective_rabi
    _blockade_check(omega_eff, u)

    natural = tuple(
        natural_decay_channels(basis, gamma_p1, p1_branching, gamma_r)
    )
    # p2 keeps its width only while the lasers are off: a real envelope
    # switches adiabatically on the 1/delta scale, so the ideal square
    # pulse's stranded p2 residue is an artifact to drain between pulses,
    # not a population to scatter mid-pulse
    p2_drain = tuple(
        natural_decay_channels(
            basis, 0.0, p1_branching, 0.0,
            gamma_p2=gamma_p2, p2_branching=p1_branching,
        )
    )
    recycle: tuple[Channel, ...] = ()
    if recycle_rate > 0.0:
        w_g = p1_branching[0] / (p1_branching[0] + p1_branching[1])
        chans = []
        for j in range(basis.n_atoms):
            for lvl, w in (("g", w_g), ("e", 1.0 - w_g)):
                chans.append(
                    Channel(
                        embed(basis, j, {(lvl, "h"): 1.0}),
                        recycle_rate * w,
                        f"recycle-{lvl}{j}",
                    )
                )
        recycle = tuple(chans)

    pulse_channels = natural + recycle
    if dephasing is not None:
        pulse_channels = pulse_channels + tuple(
            dephasing_channels(basis, *dephasing)
        )
    relax_channels = natural + p2_drain + recycle

    relax_h = full_ladder_hamiltonian(ladder, basis, "relax")
    tau_pump = SQRT2 * math.pi / omega_eff
    tau_mix = TWO_PI / omega_eff

    def pulse(label: str, source: DriveSource, duration: float) -> Segment:
        # cancel the differential light shift so every pulse stays
        # two-photon resonant: the bright ground state shifts by
        # -n_legs*omega_lower^2/(4*delta) while r shifts by
        # -omega_upper^2/(4*delta)
        n_legs = 2.0 if source is DriveSource.PLUS else 1.0
        comp = (n_legs * ladder.omega_lower**2 - ladder.omega_upper**2) / (
            4.0 * ladder.delta_mid
        )
        h = full_ladder_hamiltonian(
            replace(ladder, source=source), basis, "pulse",
            interaction=inter, detuning=comp,
        )
        return Segment(SegmentKind.PULSE, duration, label,
                       channels=pulse_channels, hamiltonian=h)

    segs = (
        pulse("A", DriveSource.G, tau_pump),
        Segment(SegmentKind.RELAX, relax_duration, "relax-A",
                channels=relax_channels, hamiltonian=relax_h),
        pulse("B", DriveSource.E, tau_pump),
        Segment(SegmentKind.RELAX, relax_duration, "relax-B",
                channels=relax_channels, hamiltonian=relax_h),
        pulse("C", DriveSource.PLUS, tau_mix),
        Segment(SegmentKind.RELAX, relax_duration, "relax-C",
                channels=relax_channels, hamiltonian=relax_h),
    )
    params = dict(
        omega_lower=ladder.omega_lower, omega_upper=ladder.omega_upper,
        delta_mid=ladder.delta_mid, omega_b=ladder.omega_b,
        omega_a_effective=omega_eff, u=u, gamma_p1=gamma_p1, gamma_r=gamma_r,
        gamma_p2=gamma_p2,
        relax_duration=relax_duration, p1_branching=p1_branching,
        recycle_rate=recycle_rate, dephasing=dephasing,
    )
    return Protocol("bell-full", basis, segs, cycles, params)


# ---------------------------------------------------------------------------
# mixing-pulse timing


def solve_mixing_timing(omega_a: float, max_k: int = 8) -> TimingSolution:
    """Smallest-duration detuned mixing pulse closing both even sectors.

    Searches integer triples (k, l, j) with delta*t = 2*k*pi,
    sqrt(delta^2+4*omega_a^2)*t = 2*l*pi, sqrt(delta^2+8*omega_a^2)*t = 2*j*pi.
    The conditions force j^2 = 2*l^2 - k^2 and t = pi*sqrt(l^2-k^2)/omega_a;
    k, l, j must share parity so both sector amplitudes return to +1 (not
    just |1|). Verified against the survival-amplitude formula.
    """
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    best: TimingSolution | None = None
    best_q = None  # l^2 - k^2, proportional to t^2
    for k in range(1, max_k + 1):
        l = k + 1
        while True:
            q = l * l - k * k
            if best_q is not None and q >= best_q:
                break
            if q > 400 * max_k * max_k:
                break
            jsq = 2 * l * l - k * k
            j = math.isqrt(jsq)
            if j * j == jsq and (l - k) % 2 == 0 and (j - k) % 2 == 0:
                t = math.pi * math.sqrt(q) / omega_a
                delta = 2.0 * k * math.pi / t
                res = (
                    abs(delta * t - 2.0 * k * math.pi),
                    abs(math.sqrt(delta**2 + 4.0 * omega_a**2) * t - 2.0 * l * math.pi),
                    abs(math.sqrt(delta**2 + 8.0 * omega_a**2) * t - 2.0 * j * math.pi),
                )
                a2 = survival_amplitude(2, omega_a, delta, t)
                a4 = survival_amplitude(4, omega_a, delta, t)
                if max(res) < 1e-9 and abs(a2 - 1.0) < 1e-9 and abs(a4 - 1.0) < 1e-9:
                    best = TimingSolution(delta, t, k, l, j, res)
                    best_q = q
            l += 1
    if best is None:
        raise ValueError(f"no timing solution with k <= {max_k}")
    return best


# ---------------------------------------------------------------------------
# protocol transforms


def gaussianize(p: Protocol, sigmas: dict[str, float]) -> Protocol:
    """Swap square pulses for area-preserving Gaussians.

    Each pulse labelled in ``sigmas`` becomes a 6*sigma window with envelope
    peak chosen so the integrated amplitude equals the square pulse's
    rabi*duration (the peak works out to the original amplitude for the pump
    sigmas quoted in the studies). Original durations are stashed in params
    for the round trip.
    """
    new_segs = []
    square_durations = {}
    square_rabis = {}
    for seg in p.segments:
        if seg.kind is not SegmentKind.PULSE:
            new_segs.append(seg)
            continue
        if seg.drive is None:
            raise ValueError("cannot gaussianize an explicit-Hamiltonian pulse")
        if seg.drive.envelope.kind is not EnvelopeKind.SQUARE:
            raise ValueError(f"segment {seg.label!r} is not square")
        if seg.label not in sigmas:
            raise ValueError(f"no sigma given for pulse {seg.label!r}")
        sigma = sigmas[seg.label]
        area = seg.drive.rabi * seg.duration
        peak = area / (sigma * math.sqrt(TWO_PI))
        square_durations[seg.label] = seg.duration
        square_rabis[seg.label] = seg.drive.rabi
        drive = replace(seg.drive, rabi=peak, envelope=gaussian_envelope(sigma))
        new_segs.append(replace(seg, duration=6.0 * sigma, drive=drive))
    params = dict(p.params)
    params["square_durations"] = square_durations
    params["square_rabis"] = square_rabis
    return replace(p, name=p.name + "-gaussian", segments=tuple(new_segs),
                   params=params)


def bell_gaussian_sigmas() -> dict[str, float]:
    """The studied pulse widths, in us: pumps 1/(4*sqrt(pi)), mix
    1/(4*sqrt(2*pi))."""
    return {
        "A": 1.0 / (4.0 * math.sqrt(math.pi)),
        "B": 1.0 / (4.0 * math.sqrt(math.pi)),
        "C": 1.0 / (4.0 * math.sqrt(TWO_PI)),
    }


def squareize(p: Protocol) -> Protocol:
    """Round-trip inverse of gaussianize using the stashed durations."""
    durations = p.params.get("square_durations")
    rabis = p.params.get("square_rabis")
    if not durations:
        raise ValueError("protocol carries no square-pulse record")
    new_segs = []
    for seg in p.segments:
        if seg.kind is SegmentKind.PULSE and seg.label in durations:
            drive = replace(seg.drive, rabi=rabis[seg.label], envelope=SQUARE)
            new_segs.append(replace(seg, duration=durations[seg.label], drive=drive))
        else:
            new_segs.append(seg)
    params = dict(p.params)
    params.pop("square_durations", None)
    params.pop("square_rabis", None)
    name = p.name.removesuffix("-gaussian")
    return replace(p, name=name, segments=tuple(new_segs), params=params)


def perturb_timing(
    p: Protocol, fraction: float, labels: tuple[str, ...] | None = None
) -> Protocol:
    """Stretch pulse durations by (1+fraction); relaxation and microwave
    segments are untouched. ``labels`` restricts the error to the named
    pulse segments (e.g. the pump pulses only); None hits every pulse."""
    if abs(fraction) >= 0.5:
        raise ValueError("timing perturbation out of range")
    if fraction == 0.0:
        return p
    new_segs = tuple(
        replace(s, duration=s.duration * (1.0 + fraction))
        if s.kind is SegmentKind.PULSE and (labels is None or s.label in labels)
        else s
        for s in p.segments
    )
    params = dict(p.params)
    params["timing_fraction"] = fraction
    return replace(p, name=f"{p.name}+{fraction:+.0%}", segments=new_segs,
                   params=params)


# ---------------------------------------------------------------------------
# execution


@dataclass
class RunResult:
    protocol_name: str
    times: list[float]
    cycle_index: list[int]
    labels: list[str]
    observables: dict[str, list[float]]
    trace_errors: list[float]
    stats: EvolveStats
    backend: str
    final_rho: np.ndarray
    routes: list[str] = field(default_factory=list)

    def final(self, name: str) -> float:
        return self.observables[name][-1]


def _observe(rho: np.ndarray, obs) -> float:
    if isinstance(obs, OperatorMatrix):
        val = obs.expect(rho)
    elif callable(obs):
        return float(obs(rho))
    else:
        return population(rho, np.asarray(obs))
    if abs(val.imag) > 1e-8:
        raise ValueError("observable expectation has a large imaginary part")
    return float(val.real)


# Static segments can skip the capped RK stepper entirely. Three exact
# routes, picked per segment by structure and a rough cost model (seconds):
#   unitary - no channels: eigendecompose H once, apply E rho E^dag.
#   expm    - channels, small space: dense superoperator exponential.
#   krylov  - channels, large space: expm_multiply on a sparse Liouvillian
#             (worthwhile because relaxation norms are tiny, so each
#             application is a handful of sparse matvecs).
PROPAGATOR_DIM_LIMIT = 48


def _expm_cost(dim: int) -> float:
    return 2e-8 * float(dim) ** 4.5


def _eig_cost(dim: int) -> float:
    return 4e-9 * float(dim) ** 3


def _step_cost(dim: int) -> float:
    return 1.1e-7 * float(dim) ** 2


def _segment_propagator(h, channels, dim: int, duration: float, cache: dict):
    import hashlib

    import scipy.linalg as sla
    import scipy.sparse as sp

    hmat = h.matrix if h is not None else sp.csr_matrix((dim, dim), dtype=complex)
    lio = liouvillian_matrix(hmat, channels, dim)
    key = hashlib.sha1(lio.tobytes() + np.float64(duration).tobytes()).hexdigest()
    if key not in cache:
        cache[key] = sla.expm(lio * duration)
    return cache[key]


def _unitary_propagator(h, duration: float, cache: dict):
    import hashlib

    import scipy.linalg as sla

    hd = h.dense()
    key = hashlib.sha1(hd.tobytes()).hexdigest()
    if key not in cache:
        cache[key] = sla.eigh(hd)
    evals, vecs = cache[key]
    return (vecs * np.exp(-1j * evals * duration)) @ vecs.conj().T


def _krylov_generator(h, channels, dim: int, duration: float):
    import scipy.sparse as sp

    hmat = h.matrix if h is not None else sp.csr_matrix((dim, dim), dtype=complex)
    eye = sp.identity(dim, dtype=complex, format="csr")
    lio = -1j * (sp.kron(eye, hmat) - sp.kron(hmat.T, eye))
    for ch in channels:
        c = ch.jump.matrix * math.sqrt(ch.rate)
        cdc = (c.conj().T @ c).tocsr()
        lio = lio + sp.kron(c.conj(), c)
        lio = lio - 0.5 * (sp.kron(eye, cdc) + sp.kron(cdc.T, eye))
    return (lio * duration).tocsr()


def _term_drift_rate(term: Term, duration: float) -> float:
    """Max relative rate of change of a term coefficient, 1/us."""
    p0, p1, p2, p3 = term.params
    if term.code == TERM_GAUSS:
        return math.exp(-0.5) / p0
    if term.code == TERM_CEXP:
        return abs(p0)
    if term.code == TERM_RPOW6:
        qs = [p1, p1 + p2 * duration + p3 * duration * duration]
        if p3 > 0 and 0 < -p2 / (2 * p3) < duration:
            tv = -p2 / (2 * p3)
            qs.append(p1 + p2 * tv + p3 * tv * tv)
        qmin = min(qs)
        if qmin <= 0:
            raise ValueError("pair distance reaches zero inside segment")
        dq = max(abs(p2), abs(p2 + 2 * p3 * duration))
        return 3.0 * dq / qmin
    raise ValueError(f"unknown term code {term.code}")


SLICE_TOL = 0.01  # max relative coefficient change per slice
MIN_SLICES = 128


def _sliced_propagator(h, terms, dim: int, duration: float):
    """Compose expm over midpoint-sampled slices of a smooth channel-free
    segment. Slice density follows the coefficients' drift rates, so slowly
    modulated pulses (thermal motion, envelopes) cost a few hundred small
    exponentials instead of a capped-step integration."""
    import scipy.linalg as sla

    rate = max(_term_drift_rate(tm, duration) for tm in terms)
    m = int(min(max(MIN_SLICES, math.ceil(duration * rate / SLICE_TOL)), 20000))
    dt = duration / m
    base = h.dense() if h is not None else np.zeros((dim, dim), dtype=complex)
    total = np.eye(dim, dtype=complex)
    for k in range(m):
        tm_mid = (k + 0.5) * dt
        hk = base.copy()
        for term in terms:
            hk += term.value(tm_mid) * term.op.toarray()
        total = sla.expm(-1j * hk * dt) @ total
    return total


def run(
    p: Protocol,
    rho0: np.ndarray,
    observables: dict[str, object],
    record: str = "cycle",
    cfg: IntegratorConfig | None = None,
    propagator: str = "auto",
) -> RunResult:
    """Advance ``cycles`` repetitions of the protocol's segment list.

    ``record`` is 'cycle' (one row per cycle) or 'segment' (one row per
    segment). Row zero always holds the initial state. Each distinct segment
    is compiled once and reused every cycle: time-dependent segments go to
    the adaptive backend, while static ones may take an exact exponential
    route (unitary sandwich, dense superoperator, or sparse Krylov) when
    ``propagator`` is 'auto' or 'always'; 'never' forces the stepper.
    """
    if record not in ("cycle", "segment"):
        raise ValueError("record must be 'cycle' or 'segment'")
    if propagator not in ("auto", "always", "never"):
        raise ValueError("propagator must be 'auto', 'always', or 'never'")
    cfg = cfg or IntegratorConfig()
    from . import backend

    dim = p.basis.dim
    rho = np.array(rho0, dtype=np.complex128, order="C")
    if rho.shape != (dim, dim):
        raise ValueError("initial state dimension mismatch")

    payloads = []
    routes = []
    expm_cache: dict = {}
    eig_cache: dict = {}
    for seg in p.segments:
        h, terms, channels = _materialize(seg, p.basis)
        prep = prepare_generator(p.basis, h, channels, terms, seg.duration, cfg)
        route = "stepper"
        if propagator != "never" and not terms:
            step_cost = p.cycles * (seg.duration / prep.max_step) * _step_cost(dim)
            if not channels:
                if propagator == "always" or _eig_cost(dim) < step_cost:
                    route = "unitary"
            elif dim <= PROPAGATOR_DIM_LIMIT:
                if propagator == "always" or _expm_cost(dim) < step_cost:
                    route = "expm"
            else:
                route = "krylov"
        elif propagator != "never" and not channels and dim <= PROPAGATOR_DIM_LIMIT:
            route = "sliced"
        if route == "unitary":
            payloads.append(_unitary_propagator(h, seg.duration, eig_cache))
        elif route == "sliced":
            payloads.append(_sliced_propagator(h, terms, dim, seg.duration))
        elif route == "expm":
            payloads.append(_segment_propagator(h, channels, dim, seg.duration, expm_cache))
        elif route == "krylov":
            lio = _krylov_generator(h, channels, dim, seg.duration)
            norm1 = abs(lio).sum(axis=0).max()
            kry_cost = p.cycles * (25 + norm1) * lio.nnz * 5e-8
            if propagator == "always" or kry_cost < step_cost:
                payloads.append(lio)
            else:
                route = "stepper"
                payloads.append(prep)
        else:
            payloads.append(prep)
        routes.append(route)

    result = RunResult(
        protocol_name=p.name,
        times=[0.0],
        cycle_index=[0],
        labels=["init"],
        observables={k: [_observe(rho, v)] for k, v in observables.items()},
        trace_errors=[abs(float(np.trace(rho).real) - 1.0)],
        stats=EvolveStats(),
        backend=backend.backend_name(),
        final_rho=rho,
        routes=routes,
    )

    from scipy.sparse.linalg import expm_multiply

    t = 0.0
    for cycle in range(1, p.cycles + 1):
        for seg, route, payload in zip(p.segments, routes, payloads):
            if route in ("unitary", "sliced"):
                rho = payload @ rho @ payload.conj().T
            elif route == "expm":
                rho = (payload @ rho.reshape(-1, order="F")).reshape(
                    dim, dim, order="F"
                )
            elif route == "krylov":
                rho = expm_multiply(payload, rho.reshape(-1, order="F")).reshape(
                    dim, dim, order="F"
                )
            else:
                try:
                    rho, stats = backend.integrate(payload, rho, cfg)
                except NumericsError as exc:
                    raise NumericsError(
                        f"cycle {cycle} segment {seg.label!r}: {exc}"
                    ) from exc
                result.stats.merge(stats)
            if route != "stepper" and cfg.hermitize:
                rho = 0.5 * (rho + rho.conj().T)
            t += seg.duration
            if record == "segment":
                _append(result, rho, t, cycle, seg.label, observables)
        if record == "cycle":
            _append(result, rho, t, cycle, "cycle", observables)
    result.final_rho = rho
    return result


def _append(result: RunResult, rho, t, cycle, label, observables):
    result.times.append(t)
    result.cycle_index.append(cycle)
    result.labels.append(label)
    for k, v in observables.items():
        result.observables[k].append(_observe(rho, v))
    result.trace_errors.append(abs(float(np.trace(rho).real) - 1.0))


# ---------------------------------------------------------------------------
# unitary cycle oracle (tests and invariance checks)


def blockaded_indices(basis: Basis) -> np.ndarray:
    """Indices of basis states with at most one atom in r."""
    keep = []
    for idx, labels in enumerate(basis.states()):
        if sum(1 for lab in labels if lab == "r") <= 1:
            keep.append(idx)
    return np.array(keep, dtype=np.intp)


def unitary_cycle(p: Protocol, hard_blockade: bool = True) -> np.ndarray:
    """Product of the coherent segments' propagators, dissipation off.

    With ``hard_blockade`` the pulse Hamiltonians are projected onto the
    at-most-one-excitation subspace (infinite-U limit) before
    exponentiation; the interaction term is dropped. Only square
    time-independent segments qualify.
    """
    import scipy.linalg as sla

    dim = p.basis.dim
    keep = blockaded_indices(p.basis) if hard_blockade else np.arange(dim)
    u_total = np.eye(len(keep), dtype=np.complex128)
    for seg in p.segments:
        if seg.kind is SegmentKind.RELAX:
            continue
        if seg.kind is SegmentKind.MICROWAVE:
            h = microwave_hamiltonian(seg.microwave_rabi, p.basis).dense()
        else:
            if seg.hamiltonian is not None:
                h = seg.hamiltonian.dense()
            else:
                if seg.drive is None or seg.drive.envelope.kind is not EnvelopeKind.SQUARE:
                    raise ValueError("unitary cycle needs square static pulses")
                h = drive_hamiltonian(seg.drive, p.basis).dense()
                if not hard_blockade and seg.interaction is not None:
                    h = h + rydberg_interaction(seg.interaction, p.basis).dense()
        h_sub = h[np.ix_(keep, keep)]
        u_total = sla.expm(-1j * h_sub * seg.duration) @ u_total
    out = np.eye(dim, dtype=np.complex128)
    out[np.ix_(keep, keep)] = u_total
    return out
