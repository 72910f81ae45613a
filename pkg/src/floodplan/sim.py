"""Synthetic two-branch coastal river.

Four stations drain to a tidal boundary through three gates and two pumps::

    S1 ──channel── S26 ══gate/pump══> ocean
     └──channel── S25A ──gate── S25B ══gate/pump══> ocean

Levels are in feet, flows in feet of stage per hour (storage areas are
normalised), and the state advances by explicit Euler steps of one hour.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .data import EPOCH, TimeSeriesFrame
from .errors import ConfigError, ContractError

LEVEL_BOUNDS = (-2.0, 6.0)
STAGE_ENVELOPE = (-1.25, 4.05)
TIDE = "tide"


@dataclass(frozen=True)
class Station:
    id: str
    storage_area: float = 1.0
    rain_catchment_coeff: float = 0.1


@dataclass(frozen=True)
class Structure:
    id: str
    kind: str  # "gate" | "pump"
    upstream: str
    downstream: str  # station id or TIDE
    capacity: float
    bounds: tuple[float, float] = (0.0, 1.0)
    physical_range: tuple[float, float] = (0.0, 1.0)

    @property
    def column(self) -> str:
        return f"{self.kind.upper()}_{self.id}"


@dataclass(frozen=True)
class Channel:
    """Uncontrolled reach between two stations with linear conductance."""

    a: str
    b: str
    conductance: float


@dataclass(frozen=True)
class RiverTopology:
    stations: tuple[Station, ...]
    structures: tuple[Structure, ...]
    channels: tuple[Channel, ...] = ()
    rain_column: str = "RAIN_1"
    tide_column: str = "TIDE_S4"

    def __post_init__(self):
        ids = {s.id for s in self.stations}
        for st in self.structures:
            if st.kind not in ("gate", "pump"):
                raise ConfigError(f"structure {st.id}: unknown kind {st.kind!r}")
            if st.upstream not in ids or (st.downstream != TIDE and st.downstream not in ids):
                raise ConfigError(f"structure {st.column} references an unknown station")
            if st.kind == "pump" and st.downstream == st.upstream:
                raise ConfigError(f"pump {st.id} must discharge downstream")
        for ch in self.channels:
            if ch.a not in ids or ch.b not in ids or ch.a == ch.b:
                raise ConfigError(f"bad channel {ch}")

    @property
    def station_ids(self) -> list[str]:
        return [s.id for s in self.stations]

    @property
    def gates(self) -> list[Structure]:
        return [s for s in self.structures if s.kind == "gate"]

    @property
    def pumps(self) -> list[Structure]:
        return [s for s in self.structures if s.kind == "pump"]

    @property
    def ordered_structures(self) -> list[Structure]:
        """Gates then pumps: the column order of schedules."""
        return self.gates + self.pumps

    @property
    def columns(self) -> tuple[str, ...]:
        return ((self.rain_column, self.tide_column)
                + tuple(s.column for s in self.ordered_structures)
                + tuple(f"WS_{s}" for s in self.station_ids))

    @property
    def class_counts(self) -> dict[str, int]:
        return {"rain": 1, "tide": 1, "gate": len(self.gates), "pump": len(self.pumps),
                "water": len(self.stations)}

    @property
    def bounds(self) -> np.ndarray:
        return np.array([s.bounds for s in self.ordered_structures], dtype=np.float64)

    @property
    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 connectivity over stations (channels and inter-station gates)."""
        ids = self.station_ids
        A = np.zeros((len(ids), len(ids)))
        pairs = [(c.a, c.b) for c in self.channels]
        pairs += [(s.upstream, s.downstream) for s in self.structures if s.downstream != TIDE]
        for a, b in pairs:
            i, j = ids.index(a), ids.index(b)
            A[i, j] = A[j, i] = 1.0
        return A

    def physical_scale(self) -> dict[str, tuple[float, float]]:
        return {s.column: s.physical_range for s in self.ordered_structures}


GATE_CAPACITY = 0.15  # ft/h per unit opening per sqrt(ft)
PUMP_CAPACITY = 0.05  # ft/h per unit opening


def default_topology() -> RiverTopology:
    stations = (
        Station("S1", rain_catchment_coeff=0.14),
        Station("S26", rain_catchment_coeff=0.10),
        Station("S25B", rain_catchment_coeff=0.10),
        Station("S25A", rain_catchment_coeff=0.12),
    )
    gate_ft, pump_cfs = (0.0, 10.0), (0.0, 1500.0)
    structures = (
        Structure("S26", "gate", "S26", TIDE, GATE_CAPACITY, physical_range=gate_ft),
        Structure("S25B", "gate", "S25B", TIDE, GATE_CAPACITY, physical_range=gate_ft),
        Structure("S25A", "gate", "S25A", "S25B", GATE_CAPACITY, physical_range=gate_ft),
        Structure("S26", "pump", "S26", TIDE, PUMP_CAPACITY, physical_range=pump_cfs),
        Structure("S25B", "pump", "S25B", TIDE, PUMP_CAPACITY, physical_range=pump_cfs),
    )
    channels = (Channel("S1", "S26", 0.25), Channel("S1", "S25A", 0.25))
    return RiverTopology(stations, structures, channels)


def tide_signal(t):
    """Synthetic ocean stage (ft): semidiurnal, diurnal and spring-neap constituents."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ContractError("tide_signal needs t >= 0")
    out = (1.2 * np.sin(2 * np.pi * t / 12.42) + 0.4 * np.sin(2 * np.pi * t / 25.82)
           + 0.3 * np.sin(2 * np.pi * t / 354.4) + 0.5)
    return float(out) if out.ndim == 0 else out


@dataclass
class SimState:
    levels: np.ndarray
    clock: float = 0.0

    def __post_init__(self):
        self.levels = np.clip(np.asarray(self.levels, dtype=np.float64), *LEVEL_BOUNDS)


class _Compiled:
    """Index arrays for vectorised stepping of one topology."""

    def __init__(self, topo: RiverTopology):
        ids = topo.station_ids
        self.n = len(ids)
        self.area = np.array([s.storage_area for s in topo.stations])
        self.catch = np.array([s.rain_catchment_coeff for s in topo.stations])
        structs = topo.ordered_structures
        self.kind_gate = np.array([s.kind == "gate" for s in structs])
        self.cap = np.array([s.capacity for s in structs])
        self.up = np.array([ids.index(s.upstream) for s in structs])
        self.to_tide = np.array([s.downstream == TIDE for s in structs])
        self.dn = np.array([ids.index(s.downstream) if s.downstream != TIDE else -1 for s in structs])
        self.ch_a = np.array([ids.index(c.a) for c in topo.channels], dtype=int)
        self.ch_b = np.array([ids.index(c.b) for c in topo.channels], dtype=int)
        self.ch_c = np.array([c.conductance for c in topo.channels])


_CACHE: dict[int, tuple[RiverTopology, _Compiled]] = {}


def _compiled(topo: RiverTopology) -> _Compiled:
    hit = _CACHE.get(id(topo))
    if hit is None or hit[0] is not topo:
        hit = _CACHE[id(topo)] = (topo, _Compiled(topo))
    return hit[1]


def structure_flows(levels: np.ndarray, controls: np.ndarray, tide, topo: RiverTopology) -> np.ndarray:
    """Volumetric flow through each structure, positive upstream -> downstream. Shapes (..., S)."""
    c = _compiled(topo)
    levels = np.asarray(levels, dtype=np.float64)
    tide = np.asarray(tide, dtype=np.float64)
    h_up = levels[..., c.up]
    h_dn = np.where(c.to_tide, tide[..., None], levels[..., np.maximum(c.dn, 0)])
    dh = h_up - h_dn
    gate_q = c.cap * controls * np.sign(dh) * np.sqrt(np.abs(dh))
    pump_q = c.cap * controls
    return np.where(c.kind_gate, gate_q, pump_q)


def step_levels(levels, controls, rain, tide, topo: RiverTopology, return_exchange: bool = False):
    """Vectorised one-hour step over leading batch dimensions.

    levels (..., N), controls (..., S) in [0, 1], rain and tide (...,).
    With ``return_exchange`` also returns the unclamped net external inflow
    volume (rain plus tidal exchange) per batch element.
    """
    c = _compiled(topo)
    levels = np.asarray(levels, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    if np.any(controls < 0.0) or np.any(controls > 1.0):
        raise ContractError("controls must lie in [0, 1]")
    rain = np.asarray(rain, dtype=np.float64)
    if np.any(rain < 0.0):
        raise ContractError("rain must be non-negative")
    q = structure_flows(levels, controls, tide, topo)
    vol = np.zeros(levels.shape)
    vol += c.catch * rain[..., None]
    for s in range(len(c.up)):
        vol[..., c.up[s]] -= q[..., s]
        if not c.to_tide[s]:
            vol[..., c.dn[s]] += q[..., s]
    for a, b, g in zip(c.ch_a, c.ch_b, c.ch_c):
        f = g * (levels[..., a] - levels[..., b])
        vol[..., a] -= f
        vol[..., b] += f
    new = np.clip(levels + vol / c.area, *LEVEL_BOUNDS)
    if return_exchange:
        external = (c.catch * rain[..., None]).sum(-1) - (q * c.to_tide).sum(-1)
        return new, external
    return new


def step_dynamics(state: SimState, controls, rain: float, topo: RiverTopology, tide: float | None = None) -> SimState:
    """Advance one hour. Tide defaults to the synthetic signal at the state clock."""
    tide = tide_signal(state.clock) if tide is None else tide
    return SimState(step_levels(state.levels, controls, rain, tide, topo), state.clock + 1.0)


def rule_based_controller(state: SimState | np.ndarray, topo: RiverTopology) -> np.ndarray:
    """Setpoint rules: gate 1.0 above 2.5 ft upstream else 0.2; pump 1.0 above 3.0 ft else 0."""
    levels = state.levels if isinstance(state, SimState) else np.asarray(state, dtype=np.float64)
    c = _compiled(topo)
    h_up = levels[..., c.up]
    return np.where(c.kind_gate, np.where(h_up > 2.5, 1.0, 0.2), np.where(h_up > 3.0, 1.0, 0.0))


# ---------------------------------------------------------------- dataset generation


@dataclass(frozen=True)
class StormConfig:
    mean_interarrival_h: float = 120.0
    peak_range: tuple[float, float] = (0.5, 2.5)
    duration_range: tuple[int, int] = (6, 36)
    shape: float = 2.0


@dataclass(frozen=True)
class ExplorationConfig:
    """Operator overrides of the rule controller.

    Each structure independently starts an override with probability
    ``start_prob`` per hour, holding a uniform random opening for a
    uniform random number of hours in ``duration_range``.
    """

    start_prob: float = 0.05
    duration_range: tuple[int, int] = (3, 12)

    @classmethod
    def off(cls) -> "ExplorationConfig":
        return cls(start_prob=0.0)


def storm_rain(hours: int, rng: np.random.Generator, cfg: StormConfig = StormConfig()) -> np.ndarray:
    """Poisson storm arrivals, each a gamma-shaped pulse scaled to its peak intensity (inch/h)."""
    rain = np.zeros(hours)
    t = rng.exponential(cfg.mean_interarrival_h)
    while t < hours:
        peak = rng.uniform(*cfg.peak_range)
        dur = int(rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1))
        tp = dur / 4.0
        tau = np.arange(dur) + 0.5
        pulse = peak * (tau / tp) ** cfg.shape * np.exp(cfg.shape * (1.0 - tau / tp))
        lo = int(t)
        hi = min(hours, lo + dur)
        rain[lo:hi] += pulse[: hi - lo]
        t += rng.exponential(cfg.mean_interarrival_h)
    return rain


def simulate(levels0, controls_fn, rain: np.ndarray, tide: np.ndarray, topo: RiverTopology):
    """Run a trajectory. ``controls_fn(h, levels)`` returns the openings applied during hour h.

    Returns (levels, controls), each with one row per hour; row h holds the
    state at the end of hour h.
    """
    n = len(rain)
    levels = np.zeros((n, len(topo.stations)))
    controls = np.zeros((n, len(topo.structures)))
    h = np.asarray(levels0, dtype=np.float64)
    for i in range(n):
        u = controls_fn(i, h)
        h = step_levels(h, u, rain[i], tide[i], topo)
        levels[i], controls[i] = h, u
    return levels, controls


def generate_dataset(seed: int, hours: int, topology: RiverTopology | None = None,
                     w: int = 72, k: int = 24, storms: StormConfig = StormConfig(),
                     exploration: ExplorationConfig = ExplorationConfig(),
                     initial_level: float = 0.5, start: datetime = EPOCH) -> TimeSeriesFrame:
    """Hourly frame driven by the rule controller with operator overrides. Pure in its arguments."""
    topo = topology or default_topology()
    if hours < w + k:
        raise ConfigError(f"hours must be at least w + k = {w + k}, got {hours}")
    if not STAGE_ENVELOPE[0] <= initial_level <= STAGE_ENVELOPE[1]:
        raise ConfigError("initial level outside the observed stage envelope")
    rng = np.random.default_rng(seed)
    rain = storm_rain(hours, rng, storms)
    tide = tide_signal(np.arange(hours, dtype=np.float64))
    S = len(topo.structures)
    remaining = np.zeros(S, dtype=np.int64)
    override = np.zeros(S)
    lo_d, hi_d = exploration.duration_range

    def controls_fn(i, h):
        starts = (remaining == 0) & (rng.random(S) < exploration.start_prob)
        n_new = int(starts.sum())
        if n_new:
            override[starts] = rng.random(n_new)
            remaining[starts] = rng.integers(lo_d, hi_d + 1, size=n_new)
        u = rule_based_controller(h, topo)
        active = remaining > 0
        u = np.where(active, override, u)
        remaining[active] -= 1
        return u

    levels, controls = simulate(np.full(len(topo.stations), initial_level), controls_fn, rain, tide, topo)
    values = np.column_stack([rain, tide, controls, levels])
    return TimeSeriesFrame(start, topo.columns, values, expected_counts=dict(topo.class_counts))


def open_loop_levels(start_levels: np.ndarray, schedules: np.ndarray, rain: np.ndarray, tide: np.ndarray,
                     topo: RiverTopology) -> np.ndarray:
    """Batched rollout: start (B, N), schedules (B, k, S), rain/tide (B, k) -> levels (B, k, N)."""
    h = np.asarray(start_levels, dtype=np.float64)
    out = np.zeros(schedules.shape[:2] + (h.shape[-1],))
    for j in range(schedules.shape[1]):
        h = step_levels(h, schedules[:, j], rain[:, j], tide[:, j], topo)
        out[:, j] = h
    return out


def threshold_crossing_events(levels: np.ndarray, flood: float = 3.5, min_gap: int = 24) -> int:
    """Number of distinct episodes where any station exceeds ``flood``; episodes closer than ``min_gap`` h merge."""
    over = np.asarray(levels).max(axis=1) > flood
    idx = np.flatnonzero(over)
    if idx.size == 0:
        return 0
    return int(1 + np.sum(np.diff(idx) > min_gap))

