"""Weekly fertilize-and-measure environment over the daily crop model.

Each step the agent picks a nitrogen dose from a fixed grid and a binary
mask over six measurable features. The environment applies the dose on the
first day of the week, runs the crop model for seven days, charges for the
measured features and returns a 16-element observation:

    [dvs, tagp, lai, navail, sm, nuptake_total, random,
     irrad_avg, tmin_avg, rain_avg,
     mask_tagp, mask_lai, mask_navail, mask_sm, mask_nuptake, mask_random]

Feature slots are standardized with frozen calibration statistics.
Unmeasured slots read exactly zero. DVS and the weekly weather means are
always visible. The ``random`` slot is noise with no relation to the crop.

Measurements are noiseless, instantaneous and never change the simulated
state.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cgm import CgmParams, SimState, SoilState, advance_day, initial_state, load_params
from .weather import WeatherDay, WeatherYear

MEASURABLE = ("tagp", "lai", "navail", "sm", "nuptake_total", "random")
FEATURES = ("dvs",) + MEASURABLE + ("irrad", "tmin", "rain")
N_MEASURE = len(MEASURABLE)
N_FEATURES = len(FEATURES)
OBS_SIZE = N_FEATURES + N_MEASURE
MEASURABLE_SLOTS = slice(1, 1 + N_MEASURE)
SD_FLOOR = 1e-6
DAYS_PER_WEEK = 7

OBSERVABILITY = ("afa", "all_observed", "none_observed")

EPISODE_CSV_HEADER = ("week", "dvs", "twso", "tagp", "lai", "sm", "navail", "nuptake",
                      "n_applied", "cum_n", "mask_bits", "measure_cost", "reward")


def fmt_float(x) -> str:
    """Shortest text that reads back to the same double."""
    return repr(float(x))


class ScenarioError(ValueError):
    pass


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """One experimental setting: costs, observability and the episode calendar.

    ``cost_vector`` is ordered as ``MEASURABLE``; one cost unit is about the
    price of 1 kg of wheat.
    """

    name: str = "custom"
    cost_vector: tuple[float, ...] = (0.0,) * N_MEASURE
    beta: float = 2.0
    deployment_cost: float = 10.0
    n_levels: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
    n_cap: float = 200.0
    weeks: int = 47
    observability: str = "afa"
    gamma: float = 1.0
    init_soil_mean: float = 15.0
    init_soil_sd: float = 15.0
    init_clip: tuple[float, float] = (0.0, 100.0)
    random_feature_mean: float = 10.0
    random_feature_sd: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "cost_vector", tuple(float(c) for c in self.cost_vector))
        object.__setattr__(self, "n_levels", tuple(float(n) for n in self.n_levels))
        object.__setattr__(self, "init_clip", tuple(float(c) for c in self.init_clip))
        self.validate()

    def validate(self):
        if len(self.cost_vector) != N_MEASURE:
            raise ScenarioError(f"cost_vector needs {N_MEASURE} entries")
        if any(c < 0 or not math.isfinite(c) for c in self.cost_vector):
            raise ScenarioError("costs must be finite and >= 0")
        lv = self.n_levels
        if not lv or lv[0] != 0.0 or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ScenarioError("n_levels must be strictly increasing and start at 0")
        if not self.n_cap > 0:
            raise ScenarioError("n_cap must be > 0")
        if self.weeks < 1:
            raise ScenarioError("weeks must be >= 1")
        if self.observability not in OBSERVABILITY:
            raise ScenarioError(f"observability must be one of {OBSERVABILITY}")
        if not 0 < self.gamma <= 1:
            raise ScenarioError("gamma must lie in (0, 1]")
        if self.beta < 0 or self.deployment_cost < 0:
            raise ScenarioError("beta and deployment_cost must be >= 0")
        if self.init_soil_sd < 0 or self.random_feature_sd < 0:
            raise ScenarioError("standard deviations must be >= 0")
        if self.init_clip[0] > self.init_clip[1]:
            raise ScenarioError("init_clip must be (low, high) with low <= high")

    @property
    def n_fert(self) -> int:
        return len(self.n_levels)

    @property
    def measures(self) -> bool:
        """Whether measuring is part of the action space."""
        return self.observability == "afa"

    @property
    def n_measure_actions(self) -> int:
        return N_MEASURE if self.measures else 0

    @property
    def episode_days(self) -> int:
        return self.weeks * DAYS_PER_WEEK

    def to_dict(self):
        d = asdict(self)
        for k in ("cost_vector", "n_levels", "init_clip"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario key(s): {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


REALISTIC_COSTS = (25.0, 5.0, 20.0, 5.0, 20.0, 10.0)

_PRESETS = {
    "no-cost": dict(cost_vector=(0.0,) * N_MEASURE),
    "flat-cost": dict(cost_vector=(10.0,) * N_MEASURE),
    "realistic": dict(cost_vector=REALISTIC_COSTS),
    "exp-cost": dict(cost_vector=(60.0,) * N_MEASURE),
    "all-observed": dict(cost_vector=(0.0,) * N_MEASURE, observability="all_observed"),
    "none-observed": dict(cost_vector=(0.0,) * N_MEASURE, observability="none_observed"),
}
SCENARIO_NAMES = tuple(_PRESETS)


def canonical_scenario_name(name: str) -> str:
    key = name.strip().lower().replace("_", "-").replace(" ", "-")
    if key not in _PRESETS:
        raise ScenarioError(f"unknown scenario {name!r}; known: {', '.join(SCENARIO_NAMES)}")
    return key


def make_scenario(name: str, **overrides) -> ScenarioConfig:
    key = canonical_scenario_name(name)
    kwargs = dict(_PRESETS[key], name=key)
    kwargs.update(overrides)
    return ScenarioConfig(**kwargs)


@dataclass(frozen=True)
class AgentAction:
    """Fertilizer level index plus the six measure flags.

    ``dose`` bypasses the level grid with an explicit kg/ha amount; the
    scripted baselines use it for doses that are not on the grid.
    """

    fert_index: int
    measure_mask: tuple[bool, ...] = (False,) * N_MEASURE
    dose: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "measure_mask", tuple(bool(m) for m in self.measure_mask))
        if len(self.measure_mask) != N_MEASURE:
            raise ValueError(f"measure_mask needs exactly {N_MEASURE} entries")

    @property
    def mask_bits(self) -> str:
        return "".join("1" if m else "0" for m in self.measure_mask)


def measurement_cost(mask: Sequence[bool], scenario: ScenarioConfig) -> float:
    if len(mask) != N_MEASURE:
        raise ValueError(f"mask needs exactly {N_MEASURE} entries")
    return float(sum(c for c, m in zip(scenario.cost_vector, mask) if m))


def effective_mask(action_mask: Sequence[bool], scenario: ScenarioConfig) -> tuple[bool, ...]:
    if scenario.observability == "all_observed":
        return (True,) * N_MEASURE
    if scenario.observability == "none_observed":
        return (False,) * N_MEASURE
    return tuple(bool(m) for m in action_mask)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-slot mean and standard deviation for the ten feature slots."""

    mean: np.ndarray
    sd: np.ndarray
    episodes: int = 0
    seed: int | None = None

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        sd = np.maximum(np.array(self.sd, dtype=np.float64).reshape(-1), SD_FLOOR)
        if mean.shape != (N_FEATURES,) or sd.shape != (N_FEATURES,):
            raise ValueError(f"normalization stats need {N_FEATURES} entries")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(sd))):
            raise ValueError("normalization stats must be finite")
        mean.setflags(write=False)
        sd.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)

    @classmethod
    def identity(cls):
        return cls(np.zeros(N_FEATURES), np.ones(N_FEATURES))

    def standardize(self, raw):
        return (np.asarray(raw, dtype=np.float64) - self.mean) / self.sd

    def to_dict(self):
        return {"features": list(FEATURES), "mean": self.mean.tolist(), "sd": self.sd.tolist(),
                "episodes": self.episodes, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        if list(d.get("features", FEATURES)) != list(FEATURES):
            raise ValueError("normalization stats feature order does not match")
        return cls(d["mean"], d["sd"], episodes=d.get("episodes", 0), seed=d.get("seed"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other):
        return (isinstance(other, NormalizationStats) and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.sd, other.sd))

    __hash__ = None


def raw_features(week_states: Sequence[SimState], week_weather: Sequence[WeatherDay],
                 random_value: float) -> np.ndarray:
    """Unnormalized 10-slot feature vector: last crop state, mean weather."""
    last = week_states[-1]
    c, s = last.crop, last.soil
    n = len(week_weather)
    return np.array([
        c.dvs, c.tagp, c.lai, s.navail, s.sm, c.n_uptake_total, random_value,
        sum(w.irrad for w in week_weather) / n,
        sum(w.tmin for w in week_weather) / n,
        sum(w.rain for w in week_weather) / n,
    ])


def finish_observation(raw: np.ndarray, mask: Sequence[bool], stats: NormalizationStats) -> np.ndarray:
    if stats is None:
        raise ValueError("normalization stats are required")
    obs = np.zeros(OBS_SIZE)
    obs[:N_FEATURES] = stats.standardize(raw)
    m = np.array(mask, dtype=np.float64)
    obs[MEASURABLE_SLOTS][m == 0.0] = 0.0
    obs[N_FEATURES:] = m
    return obs


def assemble_observation(week_states: Sequence[SimState], week_weather: Sequence[WeatherDay],
                         mask: Sequence[bool], stats: NormalizationStats,
                         rng: np.random.Generator, scenario: ScenarioConfig | None = None
                         ) -> np.ndarray:
    if len(week_states) != DAYS_PER_WEEK or len(week_weather) != DAYS_PER_WEEK:
        raise ValueError("need exactly 7 daily states and 7 weather days")
    sc = scenario or ScenarioConfig()
    rv = rng.normal(sc.random_feature_mean, sc.random_feature_sd)
    return finish_observation(raw_features(week_states, week_weather, rv), mask, stats)


def initial_soil(draws: Sequence[float], scenario: ScenarioConfig, params: CgmParams) -> SoilState:
    """Map two pre-clip normal draws (moisture %, soil N kg/ha) to a soil state.

    Moisture percent is clipped like nitrogen and then placed linearly
    between wilting point (0 %) and field capacity (100 %).
    """
    lo, hi = scenario.init_clip
    moist_pct = min(max(draws[0], lo), hi)
    navail = min(max(draws[1], lo), hi)
    frac = (moist_pct - lo) / (hi - lo) if hi > lo else 0.0
    sm = params.sm_wp + frac * (params.sm_fc - params.sm_wp)
    return SoilState(sm=sm, navail=navail)


@dataclass(frozen=True)
class WeekRecord:
    week: int
    state: SimState
    action: AgentAction
    mask: tuple[bool, ...]
    n_requested: float
    n_applied: float
    cum_n: float
    truncated: bool
    measure_cost: float
    twso_delta: float
    reward: float
    raw_features: np.ndarray = field(repr=False, compare=False)

    @property
    def mask_bits(self) -> str:
        return "".join("1" if m else "0" for m in self.mask)


@dataclass
class EpisodeRecord:
    scenario: str
    weather_label: str
    seed: int
    initial_state: SimState
    soil_draws: tuple[float, float]
    weeks: list[WeekRecord] = field(default_factory=list)

    @property
    def final_twso(self) -> float:
        return self.weeks[-1].state.crop.twso if self.weeks else self.initial_state.crop.twso

    @property
    def total_reward(self) -> float:
        return math.fsum(w.reward for w in self.weeks)

    @property
    def total_n(self) -> float:
        return self.weeks[-1].cum_n if self.weeks else 0.0

    @property
    def fert_weeks(self) -> int:
        return sum(1 for w in self.weeks if w.n_applied > 0)

    @property
    def total_measure_cost(self) -> float:
        return math.fsum(w.measure_cost for w in self.weeks)

    def measure_counts(self) -> np.ndarray:
        counts = np.zeros(N_MEASURE, dtype=int)
        for w in self.weeks:
            counts += np.array(w.mask, dtype=int)
        return counts

    def flowering_week(self) -> int | None:
        for w in self.weeks:
            if w.state.crop.dvs >= 1.0:
                return w.week
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EPISODE_CSV_HEADER)
        for w in self.weeks:
            c, s = w.state.crop, w.state.soil
            writer.writerow([w.week, *map(fmt_float, (c.dvs, c.twso, c.tagp, c.lai, s.sm, s.navail,
                                                      c.n_uptake_total, w.n_applied, w.cum_n)),
                             w.mask_bits, fmt_float(w.measure_cost), fmt_float(w.reward)])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")


class CropEnv:
    """A single episode-at-a-time environment handle.

    ``stats`` may be ``None`` only for calibration runs, which read the raw
    feature vectors from the week records.
    """

    def __init__(self, scenario: ScenarioConfig, stats: NormalizationStats | None,
                 params: CgmParams | None = None):
        self.scenario = scenario
        self.stats = stats
        self.params = params or load_params()
        self.record: EpisodeRecord | None = None
        self._done = True

    @property
    def obs_size(self) -> int:
        return OBS_SIZE

    @property
    def n_fert(self) -> int:
        return self.scenario.n_fert

    @property
    def n_measure(self) -> int:
        return self.scenario.n_measure_actions

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, weather: WeatherYear, seed: int) -> np.ndarray:
        sc = self.scenario
        if len(weather) < sc.episode_days:
            raise ValueError(f"weather {weather.label!r} covers {len(weather)} days, "
                             f"episode needs {sc.episode_days}")
        soil_seq, feat_seq = np.random.SeedSequence(seed).spawn(2)
        draws = np.random.default_rng(soil_seq).normal(sc.init_soil_mean, sc.init_soil_sd, size=2)
        self._feature_rng = np.random.default_rng(feat_seq)
        self._weather = weather
        self._state = initial_state(initial_soil(draws, sc, self.params))
        self._week = 0
        self._cum_n = 0.0
        self._done = False
        self.record = EpisodeRecord(scenario=sc.name, weather_label=weather.label, seed=seed,
                                    initial_state=self._state,
                                    soil_draws=(float(draws[0]), float(draws[1])))
        rv = self._draw_random()
        raw = raw_features([self._state], weather.days[:1], rv)
        mask = effective_mask((False,) * N_MEASURE, sc)
        return self._finish(raw, mask)

    def _draw_random(self) -> float:
        sc = self.scenario
        return float(self._feature_rng.normal(sc.random_feature_mean, sc.random_feature_sd))

    def _finish(self, raw, mask):
        if self.stats is None:
            return finish_observation(raw, mask, NormalizationStats.identity())
        return finish_observation(raw, mask, self.stats)

    def dose_for(self, action: AgentAction) -> float:
        if action.dose is not None:
            if not (action.dose >= 0 and math.isfinite(action.dose)):
                raise ValueError("dose must be finite and >= 0")
            return float(action.dose)
        if not 0 <= action.fert_index < self.scenario.n_fert:
            raise ValueError(f"fert_index {action.fert_index} outside 0..{self.scenario.n_fert - 1}")
        return self.scenario.n_levels[action.fert_index]

    def step(self, action: AgentAction):
        if self._done:
            raise EpisodeDone("step() called on a finished episode; call reset()")
        sc, p = self.scenario, self.params
        requested = self.dose_for(action)
        remaining = sc.n_cap - self._cum_n
        if requested >= remaining:
            applied = max(0.0, remaining)
            truncated = requested > remaining
            cum_n = sc.n_cap
        else:
            applied = requested
            truncated = False
            # guards against the float sum landing one ulp above the cap
            cum_n = min(self._cum_n + applied, sc.n_cap)

        start = self._week * DAYS_PER_WEEK
        days = self._weather.days[start:start + DAYS_PER_WEEK]
        twso_before = self._state.crop.twso
        state = self._state
        week_states = []
        for i, wd in enumerate(days):
            state = advance_day(state, wd, applied if i == 0 else 0.0, p)
            week_states.append(state)

        mask = effective_mask(action.measure_mask, sc)
        cost = measurement_cost(mask, sc)
        dtwso = state.crop.twso - twso_before
        reward = dtwso - sc.beta * applied - (sc.deployment_cost if applied > 0 else 0.0) - cost

        rv = self._draw_random()
        raw = raw_features(week_states, days, rv)
        obs = self._finish(raw, mask)

        self._state = state
        self._cum_n = cum_n
        self._week += 1
        self._done = self._week >= sc.weeks
        rec = WeekRecord(week=self._week, state=state, action=action, mask=mask,
                         n_requested=requested, n_applied=applied, cum_n=cum_n,
                         truncated=truncated, measure_cost=cost, twso_delta=dtwso,
                         reward=reward, raw_features=raw)
        self.record.weeks.append(rec)
        return obs, reward, self._done, rec

    @property
    def state(self) -> SimState:
        return self._state


def reset(scenario: ScenarioConfig, weather: WeatherYear, seed: int,
          stats: NormalizationStats | None, params: CgmParams | None = None):
    env = CropEnv(scenario, stats, params)
    return env, env.reset(weather, seed)


def step(env: CropEnv, action: AgentAction):
    return env.step(action)


class SeasonEnv:
    """Wraps :class:`CropEnv` for training: every reset draws a year
    uniformly from ``weather_set`` and a fresh episode seed, both from one
    seeded stream."""

    def __init__(self, scenario: ScenarioConfig, stats: NormalizationStats,
                 weather_set: Sequence[WeatherYear], seed: int, params: CgmParams | None = None):
        if not weather_set:
            raise ValueError("weather_set is empty")
        self.env = CropEnv(scenario, stats, params)
        self.weather_set = list(weather_set)
        self.rng = np.random.default_rng(seed)

    obs_size = OBS_SIZE

    @property
    def n_fert(self):
        return self.env.n_fert

    @property
    def n_measure(self):
        return self.env.n_measure

    def reset(self) -> np.ndarray:
        year = self.weather_set[int(self.rng.integers(len(self.weather_set)))]
        return self.env.reset(year, int(self.rng.integers(2**31 - 1)))

    def step(self, action: AgentAction):
        return self.env.step(action)

    @property
    def record(self):
        return self.env.record


class SanityEnv:
    """One-week episodes whose reward is the applied nitrogen dose.

    The best return is the largest dose level; measuring is free and
    irrelevant. Used to check that the learner finds a known optimum.
    """

    obs_size = OBS_SIZE

    def __init__(self, n_levels: Sequence[float] = ScenarioConfig().n_levels, measure: bool = True):
        self.n_levels = tuple(float(n) for n in n_levels)
        self.n_fert = len(self.n_levels)
        self.n_measure = N_MEASURE if measure else 0
        self.record = None

    @property
    def optimal_return(self) -> float:
        return max(self.n_levels)

    def reset(self) -> np.ndarray:
        obs = np.zeros(OBS_SIZE)
        obs[0] = 1.0
        return obs

    def step(self, action: AgentAction):
        reward = self.n_levels[action.fert_index] if action.dose is None else float(action.dose)
        return self.reset(), reward, True, None


def calibrate_normalization(scenario: ScenarioConfig, weather_set: Sequence[WeatherYear],
                            episodes: int, seed: int, params: CgmParams | None = None,
                            return_samples: bool = False):
    """Feature statistics from uniform-random fertilization with everything measured.

    Costs are irrelevant here. Only weekly step observations enter the
    statistics, not the reset observation.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if not weather_set:
        raise ValueError("weather_set is empty")
    calib = replace(scenario, observability="afa")
    env = CropEnv(calib, None, params)
    rng = np.random.default_rng(seed)
    everything = (True,) * N_MEASURE
    rows = []
    for _ in range(episodes):
        year = weather_set[int(rng.integers(len(weather_set)))]
        env.reset(year, int(rng.integers(2**31 - 1)))
        done = False
        while not done:
            a = AgentAction(int(rng.integers(calib.n_fert)), everything)
            _, _, done, rec = env.step(a)
            rows.append(rec.raw_features)
    samples = np.array(rows)
    stats = NormalizationStats(samples.mean(axis=0), samples.std(axis=0), episodes=episodes, seed=seed)
    if return_samples:
        return stats, samples
    return stats
