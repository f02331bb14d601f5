"""Costly-measurement reinforcement learning for nitrogen management.

A surrogate crop growth model wrapped in an environment where an agent
decides each week how much nitrogen to apply and which crop features to
pay to measure.
"""

from .weather import (
    WeatherDay,
    WeatherYear,
    SyntheticClimateParams,
    load_weather_csv,
    write_weather_csv,
    generate_synthetic_year,
    synthetic_year_set,
    cumulative_tmin,
)
from .cgm import CgmParams, SimState, advance_day, run_season, load_params
from .env import (
    ScenarioConfig,
    AgentAction,
    NormalizationStats,
    EpisodeRecord,
    CropEnv,
    make_scenario,
    measurement_cost,
    calibrate_normalization,
)

__version__ = "0.1.0"

__all__ = [
    "WeatherDay",
    "WeatherYear",
    "SyntheticClimateParams",
    "load_weather_csv",
    "write_weather_csv",
    "generate_synthetic_year",
    "synthetic_year_set",
    "cumulative_tmin",
    "CgmParams",
    "SimState",
    "advance_day",
    "run_season",
    "load_params",
    "ScenarioConfig",
    "AgentAction",
    "NormalizationStats",
    "EpisodeRecord",
    "CropEnv",
    "make_scenario",
    "measurement_cost",
    "calibrate_normalization",
]
