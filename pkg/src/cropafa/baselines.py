"""Scripted comparison policies: fixed-date standard practice and random spread.

Neither policy measures anything. Both hand the environment explicit
doses (``AgentAction.dose``) instead of grid levels, because 66.67 kg/ha
and the random-spread amounts are not on the 0..60 grid.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import N_MEASURE, AgentAction, CropEnv, EpisodeRecord, NormalizationStats, ScenarioConfig
from .weather import WeatherYear

STANDARD_DOSE = 66.67
STANDARD_DATES = ((1, 1), (3, 1), (5, 1))
SPREAD_TOTAL = 200.0
NO_MEASURE = (False,) * N_MEASURE


@dataclass(frozen=True)
class SeasonCalendar:
    """Maps week indices to the calendar dates they cover.

    Week ``k`` (0-based) spans days ``7k .. 7k+6`` counted from sowing.
    """

    sowing: dt.date = dt.date(1990, 10, 1)
    weeks: int = 47

    def week_dates(self, week: int) -> tuple[dt.date, dt.date]:
        if not 0 <= week < self.weeks:
            raise IndexError(f"week {week} outside 0..{self.weeks - 1}")
        start = self.sowing + dt.timedelta(days=7 * week)
        return start, start + dt.timedelta(days=6)

    def week_of(self, month: int, day: int) -> int:
        """First week whose window contains the next ``month``/``day`` after sowing."""
        year = self.sowing.year
        target = dt.date(year, month, day)
        if target < self.sowing:
            target = dt.date(year + 1, month, day)
        week = (target - self.sowing).days // 7
        if week >= self.weeks:
            raise ValueError(f"{target} falls after the last week of the season")
        return week


def standard_weeks(calendar: SeasonCalendar) -> frozenset[int]:
    return frozenset(calendar.week_of(m, d) for m, d in STANDARD_DATES)


def standard_practice_policy(week: int, calendar: SeasonCalendar | None = None):
    """Action for 0-based ``week``: 66.67 kg/ha in the Jan 1, Mar 1 and May 1 weeks."""
    calendar = calendar or SeasonCalendar()
    dose = STANDARD_DOSE if week in standard_weeks(calendar) else 0.0
    return AgentAction(0, NO_MEASURE, dose=dose)


def random_spread_doses(rng: np.random.Generator, weeks: int = 47,
                        total: float = SPREAD_TOTAL) -> np.ndarray:
    """A uniform draw from the simplex, rounded to 0.01 kg/ha.

    Largest-remainder rounding keeps the sum at exactly ``total`` in
    hundredths.
    """
    cents_total = int(round(total * 100))
    share = rng.dirichlet(np.ones(weeks)) * cents_total
    cents = np.floor(share).astype(np.int64)
    short = cents_total - int(cents.sum())
    # ties in the remainder go to the earlier week (stable sort)
    order = np.argsort(-(share - cents), kind="stable")
    cents[order[:short]] += 1
    return cents / 100.0


def random_spread_policy(rng: np.random.Generator, weeks: int = 47):
    """Per-week action list for one season of random spreading."""
    return [AgentAction(0, NO_MEASURE, dose=float(d)) for d in random_spread_doses(rng, weeks)]


BASELINES = ("standard-practice", "random-spread")


def baseline_actions(name: str, rng: np.random.Generator, calendar: SeasonCalendar | None = None,
                     weeks: int = 47):
    if name == "standard-practice":
        return [standard_practice_policy(w, calendar) for w in range(weeks)]
    if name == "random-spread":
        return random_spread_policy(rng, weeks)
    raise ValueError(f"unknown baseline {name!r}; known: {', '.join(BASELINES)}")


def run_baseline(name: str, scenario: ScenarioConfig, weather_years: Sequence[WeatherYear],
                 seed: int, stats: NormalizationStats | None = None, params=None,
                 episodes_per_year: int = 1) -> list[EpisodeRecord]:
    """Run ``name`` once per year (times ``episodes_per_year``).

    Episode seeds and the random-spread schedules come from one stream
    seeded by ``seed``, so the output is a function of the arguments.
    """
    env = CropEnv(scenario, stats, params)
    rng = np.random.default_rng(seed)
    records = []
    for year in weather_years:
        for _ in range(episodes_per_year):
            ep_seed = int(rng.integers(2**31 - 1))
            actions = baseline_actions(name, rng, weeks=scenario.weeks)
            env.reset(year, ep_seed)
            for a in actions:
                env.step(a)
            records.append(env.record)
    return records

