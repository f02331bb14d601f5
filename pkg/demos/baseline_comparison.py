"""Compare the two scripted baselines on the evaluation years.

Prints median yield with its bootstrap interval and quartiles for each
baseline, then the mean return, which also charges for nitrogen and field
visits.

    python demos/baseline_comparison.py
"""
import numpy as np

from cropafa import make_scenario, synthetic_year_set
from cropafa.baselines import BASELINES, run_baseline
from cropafa.evaluation import summarize_yields
from cropafa.weather import split_by_parity


def main():
    _, eval_years = split_by_parity(synthetic_year_set(range(1990, 2023)))
    scenario = make_scenario("realistic")
    print(f"{len(eval_years)} evaluation years, scenario {scenario.name}")
    for name in BASELINES:
        recs = run_baseline(name, scenario, eval_years, seed=0, episodes_per_year=2)
        s = summarize_yields(recs, resamples=2000)
        ret = np.mean([r.total_reward for r in recs])
        print(f"{name:18s} median {s.median:.2f} t/ha  95% CI [{s.ci_low:.2f}, {s.ci_high:.2f}]  "
              f"IQR {s.q1:.2f}-{s.q3:.2f}  mean return {ret:.0f}")


if __name__ == "__main__":
    main()
