"""Daily weather for the crop simulator.

Weather comes either from a CSV file (one row per day, header
``day,irrad_j_m2,tmin_c,tmax_c,rain_cm``) or from a seeded synthetic
generator with a seasonal temperature cycle. Units are fixed at ingestion:
irradiance in J/m2/day, temperatures in degrees C, rain in cm/day.

Day 0 is the sowing day (October 1st). ``tmax`` only drives the crop model;
the agent never sees it.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

EPISODE_DAYS = 47 * 7
CSV_HEADER = ("day", "irrad_j_m2", "tmin_c", "tmax_c", "rain_cm")
SOWING_DOY = 274


class WeatherDataError(ValueError):
    """Raised for malformed or physically impossible weather input."""


class WeatherDay(NamedTuple):
    day_index: int
    irrad: float
    tmin: float
    tmax: float
    rain: float


@dataclass(frozen=True, eq=False)
class WeatherYear:
    """An immutable run of consecutive days starting at the sowing day.

    Columns are stored as read-only numpy arrays; ``days`` gives the
    row view as :class:`WeatherDay` tuples.
    """

    label: str
    irrad: np.ndarray
    tmin: np.ndarray
    tmax: np.ndarray
    rain: np.ndarray
    source: str = "csv"
    first_day: int = 0

    def __post_init__(self):
        cols = {}
        for name in ("irrad", "tmin", "tmax", "rain"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            cols[name] = arr
            object.__setattr__(self, name, arr)
        n = len(cols["irrad"])
        if any(len(a) != n for a in cols.values()):
            raise WeatherDataError("weather columns differ in length")
        _check_ranges(cols, first_day=self.first_day)
        days = tuple(
            WeatherDay(self.first_day + i, float(cols["irrad"][i]), float(cols["tmin"][i]),
                       float(cols["tmax"][i]), float(cols["rain"][i]))
            for i in range(n)
        )
        object.__setattr__(self, "_days", days)

    @property
    def days(self) -> tuple[WeatherDay, ...]:
        return self._days

    def __len__(self):
        return len(self._days)

    def __eq__(self, other):
        if not isinstance(other, WeatherYear):
            return NotImplemented
        return (self.label == other.label and self.source == other.source
                and self.first_day == other.first_day
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("irrad", "tmin", "tmax", "rain")))

    __hash__ = None

    @property
    def year_number(self) -> int | None:
        """Trailing integer of the label, if any (``"nl-1991"`` -> 1991)."""
        digits = ""
        for ch in reversed(self.label):
            if not ch.isdigit():
                break
            digits = ch + digits
        return int(digits) if digits else None


def _check_ranges(cols, first_day=0, row_offset=None):
    irrad, tmin, tmax, rain = cols["irrad"], cols["tmin"], cols["tmax"], cols["rain"]
    for name, arr in cols.items():
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise WeatherDataError(_where(bad[0], row_offset) + f"non-finite {name}")
    checks = [
        (irrad < 0, "irradiance must be >= 0"),
        (rain < 0, "rain must be >= 0"),
        (tmax < tmin, "tmax < tmin"),
    ]
    for mask, msg in checks:
        bad = np.flatnonzero(mask)
        if bad.size:
            raise WeatherDataError(_where(bad[0], row_offset) + msg)
    if first_day < 0:
        raise WeatherDataError("day index must be >= 0")


def _where(i, row_offset):
    if row_offset is None:
        return f"day {i}: "
    return f"line {i + row_offset}: "


def load_weather_csv(path, label: str | None = None,
                     min_days: int = EPISODE_DAYS) -> WeatherYear:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weather file not found: {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise WeatherDataError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise WeatherDataError(
                f"{path}: header must be {','.join(CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise WeatherDataError(f"{path}: line {lineno}: expected 5 fields, got {len(row)}")
            try:
                day = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise WeatherDataError(f"{path}: line {lineno}: {exc}") from None
            rows.append((lineno, day, vals))
    if not rows:
        raise WeatherDataError(f"{path}: no data rows")
    for (ln_prev, d_prev, _), (ln, d, _) in zip(rows, rows[1:]):
        if d != d_prev + 1:
            raise WeatherDataError(f"{path}: line {ln}: gap in day sequence ({d_prev} -> {d})")
    if len(rows) < min_days:
        raise WeatherDataError(
            f"{path}: insufficient coverage for 47-week episode "
            f"({len(rows)} days < {min_days})")
    data = np.array([r[2] for r in rows])
    cols = dict(irrad=data[:, 0], tmin=data[:, 1], tmax=data[:, 2], rain=data[:, 3])
    try:
        _check_ranges(cols, first_day=rows[0][1], row_offset=2)
    except WeatherDataError as exc:
        raise WeatherDataError(f"{path}: {exc}") from None
    return WeatherYear(label=label or path.stem, source="csv", first_day=rows[0][1], **cols)


def write_weather_csv(year: WeatherYear, path) -> None:
    """Write ``year`` with 1 decimal for irradiance, 2 for temperatures, 4 for rain.

    Loading a file written here and writing it again reproduces it exactly.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for d in year.days:
            fh.write(f"{d.day_index},{d.irrad:.1f},{d.tmin:.2f},{d.tmax:.2f},{d.rain:.4f}\n")


@dataclass(frozen=True)
class SyntheticClimateParams:
    """Parameters of the synthetic weather generator.

    Temperatures follow ``temp_mean + temp_amplitude * cos(2 pi (doy - temp_peak_doy) / 365)``
    plus an AR(1) daily anomaly and a per-year offset. Rain days occur with
    ``rain_probability`` and carry exponentially distributed amounts with a
    long-run mean of ``rain_mean_cm`` per day.
    """

    temp_mean: float = 10.2
    temp_amplitude: float = 7.0
    temp_peak_doy: float = 200.0
    diurnal_range: float = 8.0
    temp_noise_sd: float = 1.8
    temp_noise_autocorr: float = 0.75
    year_offset_sd: float = 0.7
    irrad_mean: float = 10.5e6
    irrad_amplitude: float = 8.0e6
    irrad_peak_doy: float = 172.0
    irrad_noise: float = 0.2
    rain_probability: float = 0.5
    rain_mean_cm: float = 0.23
    cloud_factor: float = 0.6
    start_doy: int = SOWING_DOY
    n_days: int = 365

    def validate(self):
        if not -30.0 <= self.temp_mean <= 40.0:
            raise ValueError("temp_mean outside [-30, 40] C")
        for name in ("temp_amplitude", "diurnal_range", "temp_noise_sd", "year_offset_sd",
                     "irrad_mean", "rain_mean_cm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.irrad_amplitude > self.irrad_mean or self.irrad_amplitude < 0:
            raise ValueError("irrad_amplitude must lie in [0, irrad_mean]")
        if not 0.0 <= self.temp_noise_autocorr < 1.0:
            raise ValueError("temp_noise_autocorr must lie in [0, 1)")
        for name in ("irrad_noise", "rain_probability", "cloud_factor"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.start_doy <= 366:
            raise ValueError("start_doy must lie in [1, 366]")
        if self.n_days < EPISODE_DAYS:
            raise ValueError(f"n_days must be >= {EPISODE_DAYS}")


PRESETS = {
    "normal": SyntheticClimateParams(),
    "cold": SyntheticClimateParams(temp_mean=8.7),
}


def climate_preset(name: str) -> SyntheticClimateParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown climate preset {name!r}; known: {sorted(PRESETS)}") from None


def generate_synthetic_year(seed: int, climate: SyntheticClimateParams | str = "normal",
                            label: str | None = None) -> WeatherYear:
    if isinstance(climate, str):
        climate = climate_preset(climate)
    climate.validate()
    rng = np.random.default_rng(seed)
    n = climate.n_days
    doy = (climate.start_doy + np.arange(n) - 1) % 365 + 1
    phase_t = 2 * math.pi * (doy - climate.temp_peak_doy) / 365.0
    phase_r = 2 * math.pi * (doy - climate.irrad_peak_doy) / 365.0

    offset = climate.year_offset_sd * rng.standard_normal()
    shocks = rng.standard_normal(n)
    wet = rng.random(n) < climate.rain_probability
    amounts = rng.exponential(1.0, n)
    irrad_jitter = rng.uniform(-1.0, 1.0, n)

    phi = climate.temp_noise_autocorr
    anomaly = np.empty(n)
    prev = 0.0
    scale = climate.temp_noise_sd * math.sqrt(1.0 - phi * phi)
    for i in range(n):
        prev = phi * prev + scale * shocks[i]
        anomaly[i] = prev
    tmean = climate.temp_mean + climate.temp_amplitude * np.cos(phase_t) + offset + anomaly
    tmin = tmean - 0.5 * climate.diurnal_range
    tmax = tmean + 0.5 * climate.diurnal_range

    rain = np.where(wet, climate.rain_mean_cm / max(climate.rain_probability, 1e-12) * amounts, 0.0)
    clear = climate.irrad_mean + climate.irrad_amplitude * np.cos(phase_r)
    cloud = np.where(wet, climate.cloud_factor, 1.0)
    irrad = np.maximum(clear * cloud * (1.0 + climate.irrad_noise * irrad_jitter), 0.0)

    return WeatherYear(label=label if label is not None else f"synthetic-{seed}",
                       irrad=irrad, tmin=tmin, tmax=tmax, rain=rain,
                       source=f"synthetic({seed})")


def synthetic_year_set(years: Sequence[int], preset: SyntheticClimateParams | str = "normal",
                       prefix: str = "") -> list[WeatherYear]:
    """One synthetic year per entry of ``years``, seeded by the year number."""
    return [generate_synthetic_year(int(y), preset, label=f"{prefix}{y}") for y in years]


def split_by_parity(years: Sequence[WeatherYear]) -> tuple[list[WeatherYear], list[WeatherYear]]:
    """Odd-numbered years for training, even-numbered years for evaluation."""
    train, evaluate = [], []
    for y in years:
        num = y.year_number
        if num is None:
            raise WeatherDataError(f"cannot split year {y.label!r}: no trailing year number")
        (train if num % 2 else evaluate).append(y)
    return train, evaluate


def cumulative_tmin(year: WeatherYear, n_days: int = EPISODE_DAYS) -> float:
    return float(np.sum(year.tmin[:n_days]))


def with_label(year: WeatherYear, label: str) -> WeatherYear:
    return dataclasses.replace(year, label=label)
