"""Train a small agent in the Realistic scenario and look at what it measures.

Uses 32-unit LSTMs and 30k steps so it finishes in about ten seconds on
one core. The full-width defaults (256 units, 100k steps) are what the CLI
uses; expect much slower runs there.

    python demos/train_small_agent.py [out_dir]
"""
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from cropafa import calibrate_normalization, make_scenario, synthetic_year_set
from cropafa.cli import run_policy
from cropafa.env import MEASURABLE
from cropafa.evaluation import summarize_measures, summarize_yields, temporal_profile
from cropafa.ppo import TrainConfig, train
from cropafa.weather import split_by_parity


def main(out_dir=None):
    train_years, eval_years = split_by_parity(synthetic_year_set(range(1990, 2023)))
    scenario = make_scenario("realistic")
    config = TrainConfig(total_steps=30_000, hidden=32, n_envs=8, horizon=94,
                         minibatch_sequences=16, epochs=4, learning_rate=1e-3, seed=0)
    with threadpool_limits(1):
        stats = calibrate_normalization(scenario, train_years, 20, 0)
        policy, log = train(scenario, train_years, config, stats, out_dir=out_dir)
        records = run_policy(policy, scenario, stats, eval_years, seed=1000)

    done = [r for r in log if r["mean_return"] is not None]
    for row in done[::max(1, len(done) // 6)] + done[-1:]:
        print(f"step {row['step']:>6}  mean return {row['mean_return']:8.1f}  "
              f"mean yield {row['mean_yield']:7.1f}")
    y = summarize_yields(records, resamples=2000)
    m = summarize_measures(records)
    print(f"\ngreedy evaluation on {len(records)} years: median yield {y.median:.2f} t/ha")
    print("mean measurements per season:")
    for f, mean, mad in zip(MEASURABLE, m.mean, m.mad):
        print(f"  {f:14s} {mean:5.1f} (MAD {mad:.1f})")
    prof = temporal_profile(records)
    busiest = {f: int(np.argmax(prof.frequency[i])) for i, f in enumerate(MEASURABLE)
               if prof.frequency[i].sum() > 0}
    print(f"week with most measuring, per feature: {busiest}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
