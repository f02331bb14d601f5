"""Summary statistics and report bundles for evaluation episodes.

Yields are reported in t/ha as median, inter-quartile range and a
percentile-bootstrap confidence interval of the median. Measuring
behaviour is reported as mean count per episode with the mean absolute
deviation about that mean. Quartiles use linear interpolation between
order statistics (numpy's default ``linear`` method).

A report bundle is a directory of CSV files plus ``manifest.json``. The
bundle holds no timestamps or absolute paths, so equal inputs give
byte-identical bundles.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import MEASURABLE, N_MEASURE, EpisodeRecord, fmt_float

BUNDLE_FORMAT = "cropafa-report"
BUNDLE_VERSION = 1
EPISODES_HEADER = ("scenario", "policy", "weather", "seed", "yield_kg_ha", "total_n",
                   "fert_weeks", "total_reward", "measure_cost", "flowering_week",
                   *(f"count_{f}" for f in MEASURABLE), "masks")
TRACE_HEADER = ("week", "dvs", "lai", "twso", "n_applied", "cum_n",
                *(f"measure_{f}" for f in MEASURABLE))


@dataclass(frozen=True)
class YieldSummary:
    median: float
    q1: float
    q3: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


@dataclass(frozen=True)
class MeasureSummary:
    features: tuple[str, ...]
    mean: np.ndarray
    mad: np.ndarray
    n: int

    def as_dict(self):
        return {f: (float(m), float(d)) for f, m, d in zip(self.features, self.mean, self.mad)}


@dataclass(frozen=True)
class TemporalProfile:
    features: tuple[str, ...]
    bin_edges: np.ndarray          # week numbers; bin k covers weeks edges[k] .. edges[k+1]-1
    frequency: np.ndarray          # (n_features, bins), each nonzero row sums to 1
    flowering_week: float | None   # mean first week with dvs >= 1


def bootstrap_median_ci(samples, resamples: int = 10_000, level: float = 0.95,
                        seed: int = 0, chunk: int = 1000) -> tuple[float, float]:
    """Percentile bootstrap interval for the median.

    Resample indices come from one generator seeded by ``seed`` and are
    drawn in row-major order, so chunking does not change the result. The
    samples are sorted first, which makes the interval independent of their
    order. The interval is widened, if needed, to contain the sample median.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size < 2:
        raise ValueError("bootstrap needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    rng = np.random.default_rng(seed)
    meds = np.empty(resamples)
    for start in range(0, resamples, chunk):
        k = min(chunk, resamples - start)
        idx = rng.integers(0, x.size, size=(k, x.size))
        meds[start:start + k] = np.median(x[idx], axis=1)
    alpha = 1.0 - level
    low, high = np.quantile(meds, [alpha / 2, 1 - alpha / 2])
    med = float(np.median(x))
    return min(float(low), med), max(float(high), med)


def summarize_yield_values(yields_kg_ha, resamples: int = 10_000, seed: int = 0) -> YieldSummary:
    t = np.asarray(yields_kg_ha, dtype=np.float64).ravel() / 1000.0
    if t.size == 0:
        raise ValueError("no yields to summarize")
    q1, med, q3 = np.quantile(t, [0.25, 0.5, 0.75])
    if t.size >= 2:
        lo, hi = bootstrap_median_ci(t, resamples=resamples, seed=seed)
    else:
        lo = hi = float(med)
    return YieldSummary(float(med), float(q1), float(q3), lo, hi, int(t.size))


def summarize_yields(records: Sequence[EpisodeRecord], resamples: int = 10_000,
                     seed: int = 0) -> YieldSummary:
    if not records:
        raise ValueError("no records to summarize")
    return summarize_yield_values([r.final_twso for r in records], resamples, seed)


def mean_absolute_deviation(x, axis=0):
    x = np.asarray(x, dtype=np.float64)
    return np.mean(np.abs(x - x.mean(axis=axis, keepdims=True)), axis=axis)


def summarize_measure_counts(counts) -> MeasureSummary:
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] != N_MEASURE:
        raise ValueError(f"counts must be a non-empty (episodes, {N_MEASURE}) array")
    return MeasureSummary(MEASURABLE, c.mean(axis=0), mean_absolute_deviation(c), c.shape[0])


def summarize_measures(records: Sequence[EpisodeRecord]) -> MeasureSummary:
    if not records:
        raise ValueError("no records to summarize")
    return summarize_measure_counts([r.measure_counts() for r in records])


def _masks_array(records: Sequence[EpisodeRecord]) -> np.ndarray:
    return np.array([[w.mask for w in r.weeks] for r in records], dtype=np.int64)


def profile_from_masks(masks, flowering_weeks: Iterable[int | None], bins: int | None = None
                       ) -> TemporalProfile:
    """``masks`` has shape (episodes, weeks, features) with 0/1 entries."""
    m = np.asarray(masks, dtype=np.int64)
    if m.ndim != 3 or m.shape[0] == 0:
        raise ValueError("masks must be a non-empty (episodes, weeks, features) array")
    weeks = m.shape[1]
    bins = weeks if bins is None else int(bins)
    if not 1 <= bins <= weeks:
        raise ValueError(f"bins must lie in 1..{weeks}")
    bin_of_week = np.arange(weeks) * bins // weeks
    per_week = m.sum(axis=0).T                      # (features, weeks)
    counts = np.zeros((m.shape[2], bins))
    np.add.at(counts.T, bin_of_week, per_week.T)
    totals = counts.sum(axis=1, keepdims=True)
    freq = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    edges = np.searchsorted(bin_of_week, np.arange(bins + 1)) + 1
    fw = [w for w in flowering_weeks if w is not None]
    return TemporalProfile(MEASURABLE[:m.shape[2]], edges, freq,
                           float(np.mean(fw)) if fw else None)


def temporal_profile(records: Sequence[EpisodeRecord], bins: int | None = None) -> TemporalProfile:
    """Per-feature measuring frequency over the season, normalized to sum to 1.

    A feature that was never measured keeps an all-zero profile.
    """
    if not records:
        raise ValueError("no records")
    return profile_from_masks(_masks_array(records), [r.flowering_week() for r in records], bins)


def export_trace(record: EpisodeRecord) -> str:
    """Per-week CSV of LAI, applied nitrogen and measure flags."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for wk in record.weeks:
        c = wk.state.crop
        w.writerow([wk.week, *map(fmt_float, (c.dvs, c.lai, c.twso, wk.n_applied, wk.cum_n)),
                    *(int(b) for b in wk.mask)])
    return buf.getvalue()


# ---------------------------------------------------------------- bundles

def encode_masks(record: EpisodeRecord) -> str:
    return "-".join(w.mask_bits for w in record.weeks)


def decode_masks(text: str) -> np.ndarray:
    return np.array([[int(ch) for ch in week] for week in text.split("-")], dtype=np.int64)


def episode_rows(records: Sequence[EpisodeRecord], policy: str) -> list[dict]:
    rows = []
    for r in records:
        fw = r.flowering_week()
        row = {"scenario": r.scenario, "policy": policy, "weather": r.weather_label,
               "seed": r.seed, "yield_kg_ha": r.final_twso, "total_n": r.total_n,
               "fert_weeks": r.fert_weeks, "total_reward": r.total_reward,
               "measure_cost": r.total_measure_cost, "flowering_week": "" if fw is None else fw}
        for f, c in zip(MEASURABLE, r.measure_counts()):
            row[f"count_{f}"] = int(c)
        row["masks"] = encode_masks(r)
        rows.append(row)
    return rows


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def episodes_csv(rows: Sequence[dict]) -> str:
    return _csv_text(EPISODES_HEADER, ([r[h] for h in EPISODES_HEADER] for r in rows))


def read_episodes_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EPISODES_HEADER:
            raise ValueError(f"{path}: unexpected episodes.csv header")
        rows = []
        for r in reader:
            for k in ("yield_kg_ha", "total_n", "total_reward", "measure_cost"):
                r[k] = float(r[k])
            for k in ("seed", "fert_weeks", *(f"count_{f}" for f in MEASURABLE)):
                r[k] = int(r[k])
            r["flowering_week"] = int(r["flowering_week"]) if r["flowering_week"] else None
            rows.append(r)
    return rows


YIELDS_HEADER = ("scenario", "policy", "n", "median_t_ha", "q1_t_ha", "q3_t_ha", "iqr_t_ha",
                 "ci_low_t_ha", "ci_high_t_ha")
MEASURES_HEADER = ("scenario", "policy", "feature", "mean_count", "mad_count")


def yields_table(groups: dict[tuple[str, str], YieldSummary]) -> str:
    return _csv_text(YIELDS_HEADER, (
        [sc, pol, s.n, s.median, s.q1, s.q3, s.iqr, s.ci_low, s.ci_high]
        for (sc, pol), s in groups.items()))


def measures_table(groups: dict[tuple[str, str], MeasureSummary]) -> str:
    return _csv_text(MEASURES_HEADER, (
        [sc, pol, f, float(m), float(d)]
        for (sc, pol), s in groups.items() for f, m, d in zip(s.features, s.mean, s.mad)))


def profile_table(groups: dict[tuple[str, str], TemporalProfile]) -> str:
    header = ("scenario", "policy", "bin", "week_start", "week_end", "flowering_week",
              *MEASURABLE)
    rows = []
    for (sc, pol), p in groups.items():
        fw = "" if p.flowering_week is None else p.flowering_week
        for k in range(p.frequency.shape[1]):
            rows.append([sc, pol, k, int(p.bin_edges[k]), int(p.bin_edges[k + 1]) - 1, fw,
                         *(float(v) for v in p.frequency[:, k])])
    return _csv_text(header, rows)


def summarize_rows(rows: Sequence[dict], bins: int | None = None, resamples: int = 10_000,
                   seed: int = 0):
    """Group episode rows by (scenario, policy) and summarize each group."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["policy"]), []).append(r)
    ys, ms, ps = {}, {}, {}
    for key in sorted(groups):
        g = groups[key]
        ys[key] = summarize_yield_values([r["yield_kg_ha"] for r in g], resamples, seed)
        ms[key] = summarize_measure_counts([[r[f"count_{f}"] for f in MEASURABLE] for r in g])
        ps[key] = profile_from_masks(np.stack([decode_masks(r["masks"]) for r in g]),
                                     [r["flowering_week"] for r in g], bins)
    return ys, ms, ps


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_bundle(out_dir, rows: Sequence[dict], traces: dict[str, str], manifest: dict,
                 bins: int | None = None, resamples: int = 10_000, seed: int = 0) -> dict:
    """Write episodes, summary tables, traces and ``manifest.json`` into ``out_dir``.

    Each file is written to a temporary name and renamed into place. The
    manifest gains a ``files`` map of SHA-256 hashes and is written last.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ys, ms, ps = summarize_rows(rows, bins, resamples, seed)
    files = {
        "episodes.csv": episodes_csv(rows),
        "yields.csv": yields_table(ys),
        "measures.csv": measures_table(ms),
        "temporal_profile.csv": profile_table(ps),
    }
    for label, text in sorted(traces.items()):
        files[f"trace_{label}.csv"] = text
    hashes = {}
    for name, text in files.items():
        data = text.encode("utf-8")
        atomic_write_bytes(out / name, data)
        hashes[name] = sha256_bytes(data)
    manifest = dict(manifest, format=BUNDLE_FORMAT, version=BUNDLE_VERSION,
                    bootstrap={"resamples": resamples, "seed": seed, "level": 0.95},
                    files=dict(sorted(hashes.items())))
    atomic_write_bytes(out / "manifest.json",
                       (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return manifest


def atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
