"""Walk one season through the environment by hand.

Runs standard practice in a normal and a cold synthetic year, measuring LAI
every fourth week, and prints the weekly ledger plus a few season totals.

    python demos/season_walkthrough.py
"""
from cropafa import AgentAction, CropEnv, cumulative_tmin, generate_synthetic_year, make_scenario
from cropafa.baselines import standard_practice_policy
from cropafa.env import MEASURABLE

LAI_ONLY = tuple(f == "lai" for f in MEASURABLE)


def play(year, scenario):
    env = CropEnv(scenario, None)
    env.reset(year, seed=0)
    for week in range(scenario.weeks):
        a = standard_practice_policy(week)
        if week % 4 == 0:
            a = AgentAction(a.fert_index, LAI_ONLY, a.dose)
        env.step(a)
    return env.record


def main():
    scenario = make_scenario("realistic")
    for climate in ("normal", "cold"):
        year = generate_synthetic_year(2001, climate, label=f"{climate}-2001")
        rec = play(year, scenario)
        print(f"{year.label}: cumulative tmin {cumulative_tmin(year):.0f} degC-days, "
              f"flowering in week {rec.flowering_week()}")
        print(f"  yield {rec.final_twso:.0f} kg/ha, N applied {rec.total_n:.2f} kg/ha, "
              f"measuring cost {rec.total_measure_cost:.0f}, return {rec.total_reward:.1f}")
    print()
    print("weekly ledger for the cold year (first 16 weeks):")
    print("\n".join(rec.to_csv().splitlines()[:17]))


if __name__ == "__main__":
    main()
