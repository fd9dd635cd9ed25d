"""Thermal-motion Monte Carlo and dephasing studies.

Atoms in a finite-temperature dipole trap carry random static offsets and
velocities; within each coherent pulse the positions advance ballistically,
modulating the pair interaction (-C6/r(t)^6) and imprinting per-atom Doppler
phases k_eff*(z_j + dz_j + dv_j*t) on the drives. Between segments the trap
re-pins the quasi-static offset. Trajectories are sampled independently and
averaged; dephasing enters separately as Lindblad rates on the six-level
ladder.

Trap and sampling quantities are SI (meters, Joules, Kelvin, m/s); the
conversion to simulator units (um, us, rad/us) happens inside apply_motion.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .hamiltonians import DriveSpec, InteractionSpec
from .levels import Basis, embed
from .lindblad import TERM_RPOW6, IntegratorConfig, NumericsError, Term
from .protocols import Protocol, RunResult, Segment, SegmentKind, run

TWO_PI = 2.0 * math.pi
K_B = 1.380649e-23  # J/K
C_LIGHT = 299792458.0  # m/s

# chain-axis projection of the counter-propagating 420/1011 nm pair
# (|k1|-|k2| = 2*pi*1.39 /um) at a beam-to-chain angle chosen so that
# k_eff*z is an exact 2*pi multiple at z = 6.3 um: the static lattice phase
# then drops out and only the in-pulse Doppler drift k_eff*dv_z survives
DEFAULT_Z_SPACING = 6.3e-6  # m
DEFAULT_K_EFF = TWO_PI * (4.0 / 6.3) * 1e6  # rad/m


class MotionError(RuntimeError):
    """A sampled trajectory is unusable (atoms approach collision)."""


@dataclass(frozen=True)
class TrapParams:
    """Gaussian-beam dipole trap and atom constants, SI units.

    ``depth_override`` (Joules) bypasses the depth formula entirely; the
    formula path keeps a known dimensional quirk (see trap_depth).
    """

    waist: float = 1.2e-6  # m
    wavelength: float = 8.30e-7  # m
    power: float = 1.74e-4  # W
    omega0: float = TWO_PI * 7.123e12  # rad/s
    omega_laser: float = TWO_PI * C_LIGHT / 8.30e-7  # rad/s
    linewidth: float = TWO_PI * 6.065e6  # rad/s
    mass: float = 1.44316e-25  # kg (Rb-87)
    depth_override: float | None = None  # J

    def __post_init__(self):
        for name in ("waist", "wavelength", "power", "omega0",
                     "omega_laser", "linewidth", "mass"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def intensity(p: TrapParams) -> float:
    """Peak beam intensity 2P/(pi w^2) in W/m^2."""
    return 2.0 * p.power / (math.pi * p.waist**2)


def trap_depth(p: TrapParams) -> float:
    """Trap depth U_F in Joules.

    Returns ``depth_override`` when set. The formula fallback is
    pi c^2 Gamma/(2 omega0^2) * 3/(omega0 - omega') * I, kept as-is even
    though it runs one power of omega0 short of the standard dipole
    potential, so treat its absolute scale with suspicion and prefer the
    override (or a measured T/U_F ratio).
    """
    if p.depth_override is not None:
        return p.depth_override
    if p.omega_laser == p.omega0:
        raise ValueError("zero detuning: omega_laser equals omega0")
    front = math.pi * C_LIGHT**2 * p.linewidth / (2.0 * p.omega0**2)
    return front * 3.0 / (p.omega0 - p.omega_laser) * intensity(p)


@dataclass(frozen=True)
class ThermalVariances:
    """Position (m^2) and per-axis velocity (m^2/s^2) variances."""

    x2: float
    y2: float
    z2: float
    v2: float


def thermal_variances(temperature: float, p: TrapParams) -> ThermalVariances:
    """Harmonic-trap thermal variances at temperature T (Kelvin).

    <x^2> = <y^2> = (w^2/4)(kT/U_F), <z^2> = (pi^2 w^4 / 2 lambda^2)(kT/U_F),
    <v^2> = kT/m per axis.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    depth = trap_depth(p)
    if depth <= 0:
        raise ValueError("trap depth must be positive for thermal sampling")
    ratio = K_B * temperature / depth
    return ThermalVariances(
        x2=p.waist**2 / 4.0 * ratio,
        y2=p.waist**2 / 4.0 * ratio,
        z2=math.pi**2 * p.waist**4 / (2.0 * p.wavelength**2) * ratio,
        v2=K_B * temperature / p.mass,
    )


@dataclass(frozen=True)
class ThermalSample:
    """One trajectory's motional draw: offsets (m) and velocities (m/s),
    each an (n_atoms, 3) array ordered (x, y, z)."""

    dr: np.ndarray
    dv: np.ndarray

    @property
    def n_atoms(self) -> int:
        return self.dr.shape[0]


def sample_trajectory(
    temperature: float, p: TrapParams, n_atoms: int, seed
) -> ThermalSample:
    """Independent zero-mean Gaussian draws per atom per axis.

    The standard-normal draws depend only on ``seed``; temperature enters
    through the scale factors. Sweeping T at a fixed seed therefore uses
    common random numbers, which keeps Monte-Carlo averages smoothly
    monotone in T.
    """
    var = thermal_variances(temperature, p)
    rng = np.random.default_rng(seed)
    raw_r = rng.standard_normal((n_atoms, 3))
    raw_v = rng.standard_normal((n_atoms, 3))
    sig_r = np.sqrt([var.x2, var.y2, var.z2])
    return ThermalSample(dr=raw_r * sig_r, dv=raw_v * math.sqrt(var.v2))


# ---------------------------------------------------------------------------
# motional modulation of drives and interaction


@dataclass(frozen=True)
class PairMotion:
    """Fluctuating van-der-Waals coupling for one atom pair.

    The instantaneous strength is ``strength / r^2(t)^3`` with r^2(t) =
    c0 + c1 t + c2 t^2 (um^2, t in us); ``strength`` carries the sign and
    the base U * d^6 normalization (rad/us * um^6).
    """

    i: int
    j: int
    strength: float
    c0: float
    c1: float
    c2: float

    def separation(self, t: float) -> float:
        return math.sqrt(self.c0 + self.c1 * t + self.c2 * t * t)

    def interaction(self, t: float) -> float:
        return self.strength / (self.c0 + self.c1 * t + self.c2 * t * t) ** 3


def _pair_base(interaction: InteractionSpec, i: int, j: int, d_um: float) -> float:
    # base strength normalized so the undisplaced value is reproduced
    if interaction.uniform is not None:
        return interaction.uniform * d_um**6
    if interaction.c6 is not None:
        return -interaction.c6
    raise ValueError("motion model needs a uniform or c6 interaction")


def apply_motion(
    sample: ThermalSample,
    interaction: InteractionSpec | None,
    drives: tuple[DriveSpec, ...],
    z_spacing: float = DEFAULT_Z_SPACING,
    k_eff=DEFAULT_K_EFF,
) -> tuple[tuple[PairMotion, ...], tuple[DriveSpec, ...]]:
    """Modulate a chain's interaction and drives by one motional sample.

    Atoms sit at z_j = j * z_spacing (meters); ``k_eff`` (rad/m) is a
    scalar or per-drive sequence. Returns the pair couplings as segment-time
    functions and the drives with per-atom phases k_eff*(z_j + dz_j) and
    phase rates k_eff*dv_z. A zero sample returns the base values exactly.
    """
    n = sample.n_atoms
    if np.ndim(k_eff) == 0:
        k_list = (float(k_eff),) * len(drives)
    else:
        k_list = tuple(float(k) for k in k_eff)
        if len(k_list) != len(drives):
            raise ValueError("need one k_eff per drive")

    out_drives = []
    for spec, k in zip(drives, k_list):
        phases = tuple(
            spec.atom_phase(j) + k * (j * z_spacing + sample.dr[j, 2])
            for j in range(n)
        )
        rates = tuple(
            spec.atom_phase_rate(j) + k * sample.dv[j, 2] * 1e-6
            for j in range(n)
        )
        out_drives.append(replace(spec, phases=phases, phase_rates=rates))

    pairs = []
    if interaction is not None:
        dr_um = sample.dr * 1e6
        dv_um = sample.dv  # 1 m/s == 1 um/us
        for i in range(n):
            for j in range(i + 1, n):
                d_um = (j - i) * z_spacing * 1e6
                rel0 = dr_um[j] - dr_um[i] + np.array([0.0, 0.0, d_um])
                relv = dv_um[j] - dv_um[i]
                c0 = float(rel0 @ rel0)
                c1 = 2.0 * float(rel0 @ relv)
                c2 = float(relv @ relv)
                # minimum separation over t >= 0; ballistic drift toward a
                # near-collision makes 1/r^6 stiffness explode
                r2min = c0
                if c2 > 0 and -c1 / (2 * c2) > 0:
                    r2min = c0 - c1 * c1 / (4 * c2)
                if r2min < (0.05 * d_um) ** 2:
                    raise MotionError(
                        f"atoms {i},{j} approach within 5% of spacing"
                    )
                pairs.append(
                    PairMotion(i, j, _pair_base(interaction, i, j, d_um),
                               c0, c1, c2)
                )
    return tuple(pairs), tuple(out_drives)


def motional_protocol(
    p: Protocol,
    sample: ThermalSample,
    z_spacing: float = DEFAULT_Z_SPACING,
    k_eff=DEFAULT_K_EFF,
) -> Protocol:
    """Rebuild a protocol with one trajectory's motion folded into every
    pulse segment; relaxation and microwave segments are untouched (lasers
    off, trap re-pins the offsets)."""
    if sample.n_atoms != p.basis.n_atoms:
        raise ValueError("sample/protocol atom count mismatch")
    segs = []
    for seg in p.segments:
        if seg.kind is not SegmentKind.PULSE:
            segs.append(seg)
            continue
        if seg.drive is None:
            raise ValueError("motion model needs drive-form pulse segments")
        pairs, (drive,) = apply_motion(
            sample, seg.interaction, (seg.drive,), z_spacing, k_eff
        )
        terms = list(seg.extra_terms)
        for pm in pairs:
            ni = embed(p.basis, pm.i, {("r", "r"): 1.0}).matrix
            nj = embed(p.basis, pm.j, {("r", "r"): 1.0}).matrix
            terms.append(
                Term(TERM_RPOW6, (pm.strength, pm.c0, pm.c1, pm.c2),
                     (ni @ nj).tocsr())
            )
        segs.append(
            replace(seg, drive=drive, interaction=None, extra_terms=tuple(terms))
        )
    return replace(p, name=p.name + "+motion", segments=tuple(segs))


# ---------------------------------------------------------------------------
# Monte Carlo over trajectories


@dataclass
class MonteCarloResult:
    """Per-trajectory finals plus the mean observable curve.

    ``finals`` holds NaN for failed trajectories; failures carry
    (trajectory index, message) and are reported, not raised.
    """

    temperature: float
    n_traj: int
    times: list[float]
    cycle_index: list[int]
    finals: np.ndarray
    mean_curve: np.ndarray
    failures: tuple[tuple[int, str], ...]

    @property
    def n_valid(self) -> int:
        return int(np.sum(np.isfinite(self.finals)))

    @property
    def mean_final(self) -> float:
        return float(np.nanmean(self.finals))

    @property
    def std_final(self) -> float:
        return float(np.nanstd(self.finals))


def montecarlo(
    p: Protocol,
    rho0: np.ndarray,
    observable,
    temperature: float,
    trap: TrapParams,
    n_traj: int,
    seed,
    z_spacing: float = DEFAULT_Z_SPACING,
    k_eff=DEFAULT_K_EFF,
    cfg: IntegratorConfig | None = None,
    threads: int = 1,
) -> MonteCarloResult:
    """Average the protocol over ``n_traj`` sampled motion trajectories.

    Trajectory k draws from the k-th spawn of SeedSequence(seed), so results
    are reproducible and independent of execution order or thread count.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_traj)

    def one(idx: int):
        sample = sample_trajectory(temperature, trap, p.basis.n_atoms,
                                   children[idx])
        mp = motional_protocol(p, sample, z_spacing, k_eff)
        return run(mp, rho0, {"obs": observable}, cfg=cfg)

    results: list[RunResult | None] = [None] * n_traj
    failures: list[tuple[int, str]] = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(one, k): k for k in range(n_traj)}
            for fut, k in futures.items():
                try:
                    results[k] = fut.result()
                except (MotionError, NumericsError) as exc:
                    failures.append((k, str(exc)))
    else:
        for k in range(n_traj):
            try:
                results[k] = one(k)
            except (MotionError, NumericsError) as exc:
                failures.append((k, str(exc)))

    valid = [r for r in results if r is not None]
    if not valid:
        raise NumericsError("all Monte-Carlo trajectories failed")
    n_rows = len(valid[0].times)
    finals = np.full(n_traj, np.nan)
    curves = np.full((n_traj, n_rows), np.nan)
    for k, r in enumerate(results):
        if r is not None:
            curves[k] = r.observables["obs"]
            finals[k] = curves[k][-1]
    return MonteCarloResult(
        temperature=temperature,
        n_traj=n_traj,
        times=valid[0].times,
        cycle_index=valid[0].cycle_index,
        finals=finals,
        mean_curve=np.nanmean(curves, axis=0),
        failures=tuple(sorted(failures)),
    )


# ---------------------------------------------------------------------------
# dephasing composition


@dataclass
class DephasingSurface:
    """Final populations over a (gamma_ge, gamma_p) grid, rates in rad/us."""

    gamma_ge: np.ndarray
    gamma_p: np.ndarray
    population: np.ndarray  # shape (len(gamma_ge), len(gamma_p))


def dephasing_study(
    make_protocol,
    rho0: np.ndarray,
    observable,
    gamma_ge_grid,
    gamma_p_grid,
    cfg: IntegratorConfig | None = None,
) -> DephasingSurface:
    """Evaluate the final population for every dephasing-rate pair.

    ``make_protocol(gamma_ge, gamma_p)`` must return the protocol with those
    collective dephasing rates installed on its pulse segments (lasers on).
    """
    ge = np.asarray(list(gamma_ge_grid), dtype=float)
    gp = np.asarray(list(gamma_p_grid), dtype=float)
    pop = np.empty((ge.size, gp.size))
    for a, g1 in enumerate(ge):
        for b, g2 in enumerate(gp):
            r = run(make_protocol(g1, g2), rho0, {"obs": observable}, cfg=cfg)
            pop[a, b] = r.observables["obs"][-1]
    return DephasingSurface(ge, gp, pop)


def dephasing_threshold(
    make_protocol,
    rho0: np.ndarray,
    observable,
    target: float = 0.90,
    gamma_p: float = 0.0,
    bracket: tuple[float, float] = (TWO_PI * 1e-3, TWO_PI * 30e-3),
    tol: float = TWO_PI * 1e-4,
    cfg: IntegratorConfig | None = None,
) -> float:
    """Smallest gamma_ge whose final population drops to ``target``.

    Populations decrease monotonically in the rate, so plain bisection on
    P(gamma_ge) - target suffices; ``bracket`` must straddle the crossing.
    """

    def f(g: float) -> float:
        r = run(make_protocol(g, gamma_p), rho0, {"obs": observable}, cfg=cfg)
        return r.observables["obs"][-1] - target

    lo, hi = bracket
    flo, fhi = f(lo), f(hi)
    if flo < 0 or fhi > 0:
        raise ValueError("bracket does not straddle the target population")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
