"""JSON run configurations and their translation into simulator objects.

Units convention, applied at the boundary and nowhere else: frequencies,
Rabi couplings, and Lindblad rates are given in MHz with the 2pi implicit
(a value of 2 means 2pi*2 rad/us), durations in us, lengths in um,
temperatures in uK, trap depth in mK, laser power in mW. This is the single
most likely user error, so every converted field name below says which way
it goes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .hamiltonians import FullLadderSpec
from .levels import Basis, OperatorMatrix, projector
from .lindblad import IntegratorConfig
from .noise import K_B, TrapParams
from .protocols import (
    Protocol,
    bell_gaussian_sigmas,
    bell_protocol,
    full_bell_protocol,
    gaussianize,
    ghz_protocol,
    perturb_timing,
    qutrit_protocol,
    solve_mixing_timing,
)
from .states import InitialStateKind, TargetKind, initial_state, target_state

TWO_PI = 2.0 * math.pi

PROTOCOL_NAMES = ("bell", "bell_full", "qutrit", "ghz")

# observable menu: name -> (column label, TargetKind)
_OBSERVABLES = {
    "phi_plus": TargetKind.BELL_PHI_PLUS,
    "phi_minus": TargetKind.BELL_PHI_MINUS,
    "psi_plus": TargetKind.BELL_PSI_PLUS,
    "psi_minus": TargetKind.BELL_PSI_MINUS,
    "t1": TargetKind.QUTRIT_T1,
    "t2": TargetKind.QUTRIT_T2,
    "t3": TargetKind.QUTRIT_T3,
    "ghz": TargetKind.GHZ,
}

_DEFAULT_OBSERVABLES = {
    "bell": ("phi_plus", "phi_minus", "psi_plus", "psi_minus"),
    "bell_full": ("phi_plus", "phi_minus", "psi_plus", "psi_minus"),
    "qutrit": ("t1", "t2", "t3"),
    "ghz": ("ghz",),
}


class ConfigError(ValueError):
    """A config file failed validation; the message names the field."""


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _take(data: dict, path: str, allowed: dict):
    """Pop known keys with type checks; reject strays."""
    out = {}
    for key, (types, required) in allowed.items():
        if key in data:
            val = data.pop(key)
            wants_float = types is float or (
                isinstance(types, tuple) and float in types
            )
            if wants_float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if not isinstance(val, types) or isinstance(val, bool) and types is not bool:
                _fail(f"{path}.{key}", f"expected {getattr(types, '__name__', types)}")
            out[key] = val
        elif required:
            _fail(f"{path}.{key}", "required field missing")
    if data:
        _fail(path, f"unknown field(s): {', '.join(sorted(data))}")
    return out


@dataclass(frozen=True)
class ProtocolBlock:
    """Protocol selection plus physical parameters (2pi*MHz / us).

    Optional numeric fields left as None fall through to the builder
    defaults, which carry the reference parameter set.
    """

    name: str
    cycles: int | None = None
    omega_a: float | None = None
    omega_b: float | None = None
    gamma: float | None = None
    u: float | None = None
    relax_duration: float | None = None
    omega_c: float | None = None          # qutrit microwave
    n_atoms: int = 2                      # ghz: 3, 4, or 5
    timing: str = "auto"                  # ghz: resonant | solve | auto
    omega_lower: float | None = None      # bell_full two-photon ladder
    omega_upper: float | None = None
    delta_mid: float | None = None
    gamma_p1: float | None = None
    gamma_r: float | None = None
    gamma_p2: float | None = None
    recycle_rate: float | None = None
    dephasing_ge: float | None = None     # collective, pulses only
    dephasing_p: float | None = None
    gaussian: bool = False
    sigma_a: float | None = None          # us; None -> canonical sigmas
    sigma_b: float | None = None
    sigma_c: float | None = None
    timing_fraction: float = 0.0          # fractional pulse stretch
    timing_labels: tuple[str, ...] | None = None


@dataclass(frozen=True)
class NoiseBlock:
    """Thermal-motion Monte Carlo settings (um / uK / mK / mW)."""

    temperature: float                    # uK
    trajectories: int = 100
    waist: float = 1.2                    # um
    wavelength: float = 0.83              # um
    power: float = 0.174                  # mW
    depth_mk: float | None = 2.0          # direct trap depth; None -> formula
    z_spacing: float = 6.3                # um
    k_eff: float | None = None            # rad/um; None -> package default
    resample: bool = False                # reserved: one draw per trajectory


@dataclass(frozen=True)
class IntegratorBlock:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float | None = None         # us
    hermitize: bool = True
    propagator: str = "auto"              # auto | always | never


@dataclass(frozen=True)
class OutputBlock:
    record: str = "cycle"                 # cycle | segment
    basename: str = "run"


@dataclass(frozen=True)
class RunConfig:
    protocol: ProtocolBlock
    initial_kind: str = "mixed_ge"        # mixed_ge | mixed_geh | mix
    initial_components: tuple = ()        # for kind == mix: (weight, labels)
    observables: tuple[str, ...] = ()     # empty -> per-protocol default
    noise: NoiseBlock | None = None
    integrator: IntegratorBlock = field(default_factory=IntegratorBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    seed: int = 1

    def observable_names(self) -> tuple[str, ...]:
        return self.observables or _DEFAULT_OBSERVABLES[self.protocol.name]


def parse_config(data: dict, source: str = "config") -> RunConfig:
    """Validate a decoded JSON document into a RunConfig."""
    if not isinstance(data, dict):
        _fail(source, "top level must be a JSON object")
    data = dict(data)

    raw_proto = data.pop("protocol", None)
    if not isinstance(raw_proto, dict):
        _fail(f"{source}.protocol", "required object missing")
    proto = _parse_protocol(dict(raw_proto), f"{source}.protocol")

    init_kind, init_components = "mixed_ge", ()
    if "initial_state" in data:
        raw = data.pop("initial_state")
        if not isinstance(raw, dict):
            _fail(f"{source}.initial_state", "must be an object")
        init_kind, init_components = _parse_initial(dict(raw), f"{source}.initial_state")

    observables: tuple[str, ...] = ()
    if "observables" in data:
        raw = data.pop("observables")
        if not isinstance(raw, list) or not all(isinstance(x, str) for x in raw):
            _fail(f"{source}.observables", "must be a list of names")
        for nm in raw:
            if nm not in _OBSERVABLES:
                _fail(f"{source}.observables", f"unknown observable {nm!r}")
        observables = tuple(raw)

    noise = None
    if data.get("noise") is not None:
        raw = data.pop("noise")
        if not isinstance(raw, dict):
            _fail(f"{source}.noise", "must be an object")
        noise = _parse_noise(dict(raw), f"{source}.noise")
    else:
        data.pop("noise", None)

    integ = IntegratorBlock()
    if "integrator" in data:
        raw = data.pop("integrator")
        if not isinstance(raw, dict):
            _fail(f"{source}.integrator", "must be an object")
        got = _take(dict(raw), f"{source}.integrator", {
            "rel_tol": (float, False), "abs_tol": (float, False),
            "max_step": ((float, type(None)), False),
            "hermitize": (bool, False),
            "propagator": (str, False),
        })
        integ = IntegratorBlock(**got)
        if integ.propagator not in ("auto", "always", "never"):
            _fail(f"{source}.integrator.propagator", "must be auto, always, or never")

    out = OutputBlock()
    if "output" in data:
        raw = data.pop("output")
        if not isinstance(raw, dict):
            _fail(f"{source}.output", "must be an object")
        got = _take(dict(raw), f"{source}.output", {
            "record": (str, False), "basename": (str, False),
        })
        out = OutputBlock(**got)
        if out.record not in ("cycle", "segment"):
            _fail(f"{source}.output.record", "must be cycle or segment")

    seed = data.pop("seed", 1)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        _fail(f"{source}.seed", "must be a non-negative integer")

    if data:
        _fail(source, f"unknown field(s): {', '.join(sorted(data))}")

    cfg = RunConfig(proto, init_kind, init_components, observables,
                    noise, integ, out, seed)
    for nm in cfg.observable_names():
        _check_observable_fits(cfg, nm, source)
    return cfg


# fields each protocol accepts beyond the shared set, and whether required
_SHARED_FIELDS = ("cycles", "omega_b", "u", "relax_duration", "gaussian",
                  "sigma_a", "sigma_b", "sigma_c",
                  "timing_fraction", "timing_labels")
_PROTO_FIELDS = {
    "bell": ("omega_a", "gamma"),
    "qutrit": ("omega_a", "gamma", "omega_c"),
    "ghz": ("omega_a", "gamma", "n_atoms", "timing"),
    "bell_full": ("omega_lower", "omega_upper", "delta_mid", "gamma_p1",
                  "gamma_r", "gamma_p2", "recycle_rate",
                  "dephasing_ge", "dephasing_p"),
}
_FIELD_TYPES = {
    "cycles": int, "n_atoms": int,
    "gaussian": bool, "timing": str, "timing_labels": list,
}


def _parse_protocol(raw: dict, path: str) -> ProtocolBlock:
    name = raw.pop("name", None)
    if name not in PROTOCOL_NAMES:
        _fail(f"{path}.name", f"must be one of {', '.join(PROTOCOL_NAMES)}")

    spec = {}
    for fname in _SHARED_FIELDS + _PROTO_FIELDS[name]:
        required = name == "ghz" and fname == "n_atoms"
        spec[fname] = (_FIELD_TYPES.get(fname, float), required)
    got = _take(raw, path, spec)

    if "timing_labels" in got:
        labels = got["timing_labels"]
        if not all(isinstance(x, str) for x in labels):
            _fail(f"{path}.timing_labels", "must be a list of segment labels")
        got["timing_labels"] = tuple(labels)

    block = ProtocolBlock(name=name, **got)
    if block.cycles is not None and block.cycles < 0:
        _fail(f"{path}.cycles", "must be >= 0")
    for fname in ("omega_a", "omega_b", "gamma", "u", "relax_duration",
                  "omega_c", "omega_lower", "omega_upper", "delta_mid",
                  "gamma_p1", "gamma_r", "gamma_p2", "recycle_rate",
                  "dephasing_ge", "dephasing_p"):
        val = getattr(block, fname)
        if val is not None and val < 0:
            _fail(f"{path}.{fname}", "must be >= 0")
    if name == "ghz":
        if block.n_atoms not in (3, 4, 5):
            _fail(f"{path}.n_atoms", "must be 3, 4, or 5")
        if block.timing not in ("auto", "resonant", "solve"):
            _fail(f"{path}.timing", "must be auto, resonant, or solve")
    if not -0.5 < block.timing_fraction < 0.5:
        _fail(f"{path}.timing_fraction", "must lie in (-0.5, 0.5)")
    return block


def _parse_initial(raw: dict, path: str):
    kind = raw.pop("kind", None)
    if kind not in ("mixed_ge", "mixed_geh", "mix"):
        _fail(f"{path}.kind", "must be mixed_ge, mixed_geh, or mix")
    components: tuple = ()
    if kind == "mix":
        comps = raw.pop("components", None)
        if not isinstance(comps, list) or not comps:
            _fail(f"{path}.components", "non-empty list required for kind=mix")
        parsed = []
        for i, item in enumerate(comps):
            ok = (isinstance(item, list) and len(item) == 2
                  and isinstance(item[0], (int, float))
                  and isinstance(item[1], str))
            if not ok:
                _fail(f"{path}.components[{i}]", "expected [weight, \"labels\"]")
            if item[0] <= 0:
                _fail(f"{path}.components[{i}]", "weight must be positive")
            parsed.append((float(item[0]), item[1]))
        components = tuple(parsed)
    if raw:
        _fail(path, f"unknown field(s): {', '.join(sorted(raw))}")
    return kind, components


def _parse_noise(raw: dict, path: str) -> NoiseBlock:
    got = _take(raw, path, {
        "temperature": (float, True),
        "trajectories": (int, False),
        "waist": (float, False), "wavelength": (float, False),
        "power": (float, False), "depth_mk": ((float, type(None)), False),
        "z_spacing": (float, False), "k_eff": ((float, type(None)), False),
        "resample": (bool, False),
    })
    block = NoiseBlock(**got)
    if block.temperature < 0:
        _fail(f"{path}.temperature", "must be >= 0")
    if block.trajectories < 1:
        _fail(f"{path}.trajectories", "must be >= 1")
    return block


_FITTING = {
    "bell": {"phi_plus", "phi_minus", "psi_plus", "psi_minus"},
    "bell_full": {"phi_plus", "phi_minus", "psi_plus", "psi_minus"},
    "qutrit": {"t1", "t2", "t3", "phi_plus", "phi_minus",
               "psi_plus", "psi_minus"},
    "ghz": {"ghz"},
}


def _check_observable_fits(cfg: RunConfig, nm: str, source: str):
    if nm not in _FITTING[cfg.protocol.name]:
        _fail(f"{source}.observables",
              f"{nm!r} does not fit protocol {cfg.protocol.name!r}")


def load_config(path: str) -> RunConfig:
    """Read and validate a JSON config file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_config(data, source=path)


def resolved_dict(cfg: RunConfig) -> dict:
    """Canonical plain-dict form with every default made explicit.

    This is what result files embed; parse_config() accepts it back
    unchanged (the round trip is tested).
    """
    b = cfg.protocol
    proto: dict = {"name": b.name}
    for fname in _SHARED_FIELDS + _PROTO_FIELDS[b.name]:
        val = getattr(b, fname)
        if val is None:
            continue
        proto[fname] = list(val) if isinstance(val, tuple) else val
    out = {
        "protocol": proto,
        "initial_state": {"kind": cfg.initial_kind},
        "observables": list(cfg.observable_names()),
        "integrator": asdict(cfg.integrator),
        "output": asdict(cfg.output),
        "seed": cfg.seed,
    }
    if cfg.initial_kind == "mix":
        out["initial_state"]["components"] = [
            [w, labels] for w, labels in cfg.initial_components
        ]
    if cfg.noise is not None:
        out["noise"] = asdict(cfg.noise)
    return out


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the canonical serialized form."""
    blob = json.dumps(resolved_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _rad(x: float) -> float:
    # config MHz-with-implicit-2pi -> rad/us
    return TWO_PI * x


def build_protocol(cfg: RunConfig) -> Protocol:
    """Instantiate the configured protocol, envelopes and errors applied."""
    b = cfg.protocol
    common: dict = {}
    if b.cycles is not None:
        common["cycles"] = b.cycles
    if b.relax_duration is not None:
        common["relax_duration"] = b.relax_duration
    for fname in ("omega_a", "omega_b", "gamma", "u"):
        val = getattr(b, fname)
        if val is not None:
            common[fname] = _rad(val)

    if b.name == "bell":
        p = bell_protocol(**common)
    elif b.name == "qutrit":
        if b.omega_c is not None:
            common["omega_c"] = _rad(b.omega_c)
        p = qutrit_protocol(**common)
    elif b.name == "ghz":
        omega_a = common.get("omega_a", TWO_PI * 2.0)
        if b.timing == "resonant" or (b.timing == "auto" and b.n_atoms == 3):
            common["timing"] = "resonant"
        else:
            common["timing"] = solve_mixing_timing(omega_a)
        p = ghz_protocol(b.n_atoms, **common)
    else:
        omega_b = common.pop("omega_b", TWO_PI * 1.2)
        ladder = FullLadderSpec(
            _rad(b.omega_lower) if b.omega_lower is not None else TWO_PI * 100.0,
            _rad(b.omega_upper) if b.omega_upper is not None else TWO_PI * 100.0,
            _rad(b.delta_mid) if b.delta_mid is not None else TWO_PI * 2500.0,
            omega_b,
        )
        for fname in ("gamma_p1", "gamma_r", "gamma_p2", "recycle_rate"):
            val = getattr(b, fname)
            if val is not None:
                common[fname] = _rad(val)
        if b.dephasing_ge is not None or b.dephasing_p is not None:
            ge = _rad(b.dephasing_ge or 0.0)
            common["dephasing"] = (ge, ge, _rad(b.dephasing_p or 0.0))
        p = full_bell_protocol(ladder, **common)

    if b.gaussian:
        sigmas = bell_gaussian_sigmas()
        for key, val in (("A", b.sigma_a), ("B", b.sigma_b), ("C", b.sigma_c)):
            if val is not None:
                sigmas[key] = val
        p = gaussianize(p, sigmas)
    if b.timing_fraction:
        p = perturb_timing(p, b.timing_fraction, labels=b.timing_labels)
    return p


def build_initial_state(cfg: RunConfig, basis: Basis) -> np.ndarray:
    if cfg.initial_kind == "mixed_ge":
        return initial_state(basis, InitialStateKind.FULLY_MIXED_GE)
    if cfg.initial_kind == "mixed_geh":
        return initial_state(basis, InitialStateKind.FULLY_MIXED_GEH)
    comps = [(w, tuple(labels)) for w, labels in cfg.initial_components]
    return initial_state(basis, InitialStateKind.MIX_LIST, components=comps)


def build_observables(cfg: RunConfig, basis: Basis) -> dict[str, OperatorMatrix]:
    out = {}
    for nm in cfg.observable_names():
        vec = target_state(basis, _OBSERVABLES[nm])
        out[f"P_{nm}"] = projector(basis, vector=vec)
    return out


def build_integrator(cfg: RunConfig) -> IntegratorConfig:
    b = cfg.integrator
    return IntegratorConfig(rel_tol=b.rel_tol, abs_tol=b.abs_tol,
                            max_step=b.max_step, hermitize=b.hermitize)


def build_trap(noise: NoiseBlock) -> TrapParams:
    """NoiseBlock (um/mW/mK) -> TrapParams (SI)."""
    wavelength_m = noise.wavelength * 1e-6
    return TrapParams(
        waist=noise.waist * 1e-6,
        wavelength=wavelength_m,
        power=noise.power * 1e-3,
        omega_laser=TWO_PI * 299792458.0 / wavelength_m,
        depth_override=None if noise.depth_mk is None
        else K_B * noise.depth_mk * 1e-3,
    )


def motion_kwargs(noise: NoiseBlock) -> dict:
    """Geometry arguments for montecarlo(), converted um -> m."""
    out = {"z_spacing": noise.z_spacing * 1e-6}
    if noise.k_eff is not None:
        out["k_eff"] = noise.k_eff * 1e6  # rad/um -> rad/m
    return out
