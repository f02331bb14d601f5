"""Surrogate process-based crop growth model for winter wheat.

A light-use-efficiency model with a single soil water bucket and a soil
nitrogen pool. One call to :func:`advance_day` performs, in this order:

1. thermal time and development stage (DVS),
2. the soil water bucket (rain, evaporation, transpiration, drainage),
3. the water stress factor,
4. soil nitrogen (fertilizer, mineralization, leaching) and crop uptake,
5. biomass growth limited by water and nitrogen stress,
6. partitioning to leaves and grain,
7. leaf senescence.

The order is part of the model contract. All constants come from a
parameter file (see ``data/nl_winter_wheat_default.json``). There is no
randomness in this module.
"""
from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .weather import EPISODE_DAYS, WeatherDay, WeatherYear

EPS = 1e-12
DVS_SOWING = -0.1
DEFAULT_PARAMS = "nl_winter_wheat_default"


class NonFiniteStateError(ArithmeticError):
    """A model quantity became NaN or infinite."""


class Table:
    """Piecewise-linear lookup over (x, y) breakpoints, flat outside the range."""

    __slots__ = ("xs", "ys")

    def __init__(self, points):
        pts = [(float(x), float(y)) for x, y in points]
        if len(pts) < 1:
            raise ValueError("table needs at least one breakpoint")
        xs = [p[0] for p in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("table x values must be strictly increasing")
        self.xs = tuple(xs)
        self.ys = tuple(p[1] for p in pts)

    def __call__(self, x):
        xs, ys = self.xs, self.ys
        if x <= xs[0]:
            return ys[0]
        if x >= xs[-1]:
            return ys[-1]
        i = bisect_right(xs, x)
        x0, x1 = xs[i - 1], xs[i]
        return ys[i - 1] + (ys[i] - ys[i - 1]) * (x - x0) / (x1 - x0)

    def points(self):
        return [[x, y] for x, y in zip(self.xs, self.ys)]

    def __eq__(self, other):
        return isinstance(other, Table) and self.xs == other.xs and self.ys == other.ys

    def __repr__(self):
        return f"Table({self.points()})"


_TABLE_FIELDS = ("leaf_partition", "grain_partition", "n_conc_target")


@dataclass(frozen=True)
class CgmParams:
    """Crop, soil and nitrogen constants.

    Units: temperatures in C, thermal sums in C.day, ``lue`` in kg/ha of dry
    matter per MJ/m2 of intercepted PAR, ``sla`` in LAI per kg/ha of leaf,
    ``bucket_depth`` in m, reference evapotranspiration terms in cm/day,
    nitrogen rates in kg/ha/day.
    """

    t_base: float
    tsum_emergence: float
    tsum1: float
    tsum2: float
    k_ext: float
    lue: float
    par_fraction: float
    sla: float
    leaf_emergence: float
    leaf_partition: Table
    grain_partition: Table
    lai_senescence_rate: float
    senescence_dvs: float
    sm_fc: float
    sm_wp: float
    sm_crit: float
    sm_saturation: float
    sm_air_dry: float
    bucket_depth: float
    et_floor_cm: float
    et_irrad_coeff: float
    evap_coeff: float
    transp_coeff: float
    n_mineralization_rate: float
    fert_recovery: float
    n_leaching_coeff: float
    n_conc_target: Table
    n_stress_exponent: float
    name: str = "custom"
    version: int = 1

    def __post_init__(self):
        for f in _TABLE_FIELDS:
            val = getattr(self, f)
            if not isinstance(val, Table):
                object.__setattr__(self, f, Table(val))
        self.validate()

    def validate(self):
        positive = ("tsum_emergence", "tsum1", "tsum2", "k_ext", "lue", "par_fraction", "sla",
                    "leaf_emergence", "bucket_depth", "n_stress_exponent")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        nonneg = ("lai_senescence_rate", "et_floor_cm", "et_irrad_coeff", "evap_coeff",
                  "transp_coeff", "n_mineralization_rate", "n_leaching_coeff", "sm_air_dry")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.sm_air_dry <= self.sm_wp < self.sm_crit <= self.sm_fc <= self.sm_saturation):
            raise ValueError("need sm_air_dry <= sm_wp < sm_crit <= sm_fc <= sm_saturation")
        if not 0 < self.fert_recovery <= 1:
            raise ValueError("fert_recovery must lie in (0, 1]")
        for f in ("leaf_partition", "grain_partition"):
            if any(not 0 <= y <= 1 for y in getattr(self, f).ys):
                raise ValueError(f"{f} fractions must lie in [0, 1]")
        if any(y <= 0 for y in self.n_conc_target.ys):
            raise ValueError("n_conc_target must be > 0")

    def to_dict(self):
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.points() if isinstance(val, Table) else val
        return out

    def replace(self, **changes) -> "CgmParams":
        d = self.to_dict()
        d.update(changes)
        return CgmParams(**d)


def params_from_dict(d: Mapping) -> CgmParams:
    known = {f.name for f in fields(CgmParams)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown parameter(s): {sorted(unknown)}")
    return CgmParams(**d)


def load_params(source: str | Path = DEFAULT_PARAMS) -> CgmParams:
    """Load a parameter set by bundled name or from a JSON file path."""
    path = Path(source)
    if path.suffix == ".json" and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        try:
            text = resources.files("cropafa.data").joinpath(f"{source}.json").read_text("utf-8")
        except FileNotFoundError:
            raise FileNotFoundError(f"no parameter file or bundled set named {source!r}") from None
    return params_from_dict(json.loads(text))


def save_params(params: CgmParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True, slots=True)
class CropState:
    dvs: float = DVS_SOWING
    lai: float = 0.0
    tagp: float = 0.0
    twso: float = 0.0
    n_uptake_total: float = 0.0
    emerged: bool = False
    mature: bool = False


@dataclass(frozen=True, slots=True)
class SoilState:
    """Root-zone moisture and available nitrogen, plus cumulative fluxes.

    Water fluxes are in m of water, nitrogen fluxes in kg/ha. The counters
    exist so that water and nitrogen balances can be closed exactly.
    """

    sm: float
    navail: float
    cum_rain: float = 0.0
    cum_evap: float = 0.0
    cum_transp: float = 0.0
    cum_drain: float = 0.0
    cum_n_fert: float = 0.0
    cum_n_mineral: float = 0.0
    cum_n_leached: float = 0.0


@dataclass(frozen=True, slots=True)
class SimState:
    crop: CropState
    soil: SoilState
    day: int = 0
    thermal_time: float = 0.0

    def as_dict(self):
        d = asdict(self.crop)
        d.update(asdict(self.soil))
        d["day"] = self.day
        d["thermal_time"] = self.thermal_time
        return d


def initial_state(soil: SoilState, day: int = 0) -> SimState:
    return SimState(crop=CropState(), soil=soil, day=day, thermal_time=0.0)


def dvs_from_thermal_time(tt: float, p: CgmParams) -> float:
    if tt < p.tsum_emergence:
        return DVS_SOWING + (0.0 - DVS_SOWING) * tt / p.tsum_emergence
    tt -= p.tsum_emergence
    if tt < p.tsum1:
        return tt / p.tsum1
    tt -= p.tsum1
    return min(2.0, 1.0 + tt / p.tsum2)


def _clamp01(x):
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


def water_stress(sm: float, p: CgmParams) -> float:
    return _clamp01((sm - p.sm_wp) / max(EPS, p.sm_crit - p.sm_wp))


def nitrogen_stress(n_uptake_total: float, tagp: float, dvs: float, p: CgmParams) -> float:
    ratio = _clamp01(n_uptake_total / max(EPS, p.n_conc_target(dvs) * tagp))
    return ratio ** p.n_stress_exponent


def advance_day(state: SimState, weather: WeatherDay, n_applied_today: float,
                params: CgmParams, *, stress_override: tuple[float | None, float | None] | None = None
                ) -> SimState:
    """Advance the simulation by one day.

    ``stress_override`` replaces the computed (water, nitrogen) stress
    factors used for growth; ``None`` entries keep the computed value.
    """
    if n_applied_today < 0:
        raise ValueError("n_applied_today must be >= 0")
    if not all(math.isfinite(v) for v in (weather.irrad, weather.tmin, weather.tmax, weather.rain,
                                          n_applied_today)):
        raise NonFiniteStateError(f"non-finite forcing on day {state.day}: {weather}")
    p = params
    crop, soil = state.crop, state.soil
    irrad_mj = weather.irrad * 1e-6

    # 1. development
    dtt = max(0.0, 0.5 * (weather.tmin + weather.tmax) - p.t_base)
    tt = state.thermal_time + dtt
    dvs = max(crop.dvs, dvs_from_thermal_time(tt, p))
    emerged = crop.emerged or dvs >= 0.0
    lai, tagp, twso = crop.lai, crop.tagp, crop.twso
    if emerged and not crop.emerged:
        lai = p.sla * p.leaf_emergence
        tagp = p.leaf_emergence
    mature = dvs >= 2.0

    # 2. soil water bucket, all in m of water
    depth = p.bucket_depth
    storage0 = soil.sm * depth
    rain = weather.rain * 0.01
    cover = 1.0 - math.exp(-p.k_ext * lai)
    et0 = (p.et_floor_cm + p.et_irrad_coeff * irrad_mj) * 0.01
    evap_avail = _clamp01((soil.sm - p.sm_air_dry) / max(EPS, p.sm_fc - p.sm_air_dry))
    evap = p.evap_coeff * et0 * (1.0 - cover) * evap_avail
    transp = p.transp_coeff * et0 * cover * water_stress(soil.sm, p)
    available = max(0.0, storage0 + rain - p.sm_air_dry * depth)
    outflow = evap + transp
    if outflow > available:
        scale = available / outflow
        evap *= scale
        transp *= scale
    storage = storage0 + rain - evap - transp
    drain = max(0.0, storage - p.sm_fc * depth)
    storage -= drain
    sm = storage / depth

    # 3. water stress
    f_w = water_stress(sm, p)

    # 4. nitrogen
    n_fert = p.fert_recovery * n_applied_today
    navail = soil.navail + n_fert + p.n_mineralization_rate
    leached = 0.0
    if drain > 0.0 and p.n_leaching_coeff > 0.0:
        leached = min(navail, p.n_leaching_coeff * navail * drain / max(EPS, p.sm_fc * depth))
        navail -= leached
    uptake_total = crop.n_uptake_total
    if emerged:
        demand = max(0.0, p.n_conc_target(dvs) * tagp - uptake_total)
        uptake = min(demand, navail)
        navail -= uptake
        uptake_total += uptake
    f_n = nitrogen_stress(uptake_total, tagp, dvs, p) if emerged else 0.0

    if stress_override is not None:
        if stress_override[0] is not None:
            f_w = stress_override[0]
        if stress_override[1] is not None:
            f_n = stress_override[1]

    # 5. growth
    dw = 0.0
    if emerged and 0.0 <= dvs < 2.0:
        dw = p.lue * p.par_fraction * irrad_mj * cover * f_w * f_n

    # 6. partitioning
    if dw > 0.0:
        if dvs < 1.0:
            lai += p.sla * p.leaf_partition(dvs) * dw
        else:
            twso += p.grain_partition(dvs) * dw
        tagp += dw

    # 7. senescence
    if dvs > p.senescence_dvs:
        lai -= p.lai_senescence_rate * lai

    new = SimState(
        crop=CropState(dvs=dvs, lai=lai, tagp=tagp, twso=twso, n_uptake_total=uptake_total,
                       emerged=emerged, mature=mature),
        soil=SoilState(sm=sm, navail=navail,
                       cum_rain=soil.cum_rain + rain, cum_evap=soil.cum_evap + evap,
                       cum_transp=soil.cum_transp + transp, cum_drain=soil.cum_drain + drain,
                       cum_n_fert=soil.cum_n_fert + n_fert,
                       cum_n_mineral=soil.cum_n_mineral + p.n_mineralization_rate,
                       cum_n_leached=soil.cum_n_leached + leached),
        day=state.day + 1,
        thermal_time=tt,
    )
    for v in (dvs, lai, tagp, twso, uptake_total, sm, navail, tt, dw):
        if not math.isfinite(v):
            raise NonFiniteStateError(
                f"non-finite value on day {state.day}: dvs={dvs}, lai={lai}, tagp={tagp}, "
                f"twso={twso}, sm={sm}, navail={navail}, dw={dw}")
    return new


def run_season(weather: WeatherYear, n_schedule: Mapping[int, float] | Sequence[float] | None,
               params: CgmParams, init: SoilState, n_days: int = EPISODE_DAYS) -> list[SimState]:
    """Fold :func:`advance_day` over ``n_days`` days.

    ``n_schedule`` maps day index to kg N/ha applied that day (a dense
    sequence also works). Returns the trajectory including the initial
    state, so its length is ``n_days + 1``.
    """
    if len(weather) < n_days:
        raise ValueError(f"weather covers {len(weather)} days, need {n_days}")
    if n_schedule is None:
        sched = {}
    elif isinstance(n_schedule, Mapping):
        sched = dict(n_schedule)
    else:
        sched = {i: float(v) for i, v in enumerate(n_schedule)}
    bad = [d for d in sched if not 0 <= d < n_days]
    if bad:
        raise ValueError(f"schedule days outside the episode window: {sorted(bad)}")
    state = initial_state(init)
    traj = [state]
    days = weather.days
    for d in range(n_days):
        state = advance_day(state, days[d], sched.get(d, 0.0), params)
        traj.append(state)
    return traj
