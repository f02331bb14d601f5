import math
from dataclasses import replace

import numpy as np
import pytest

import cropafa.env as envmod
from cropafa.cgm import SoilState, advance_day, initial_state, load_params
from cropafa.env import (
    FEATURES,
    MEASURABLE,
    MEASURABLE_SLOTS,
    N_FEATURES,
    N_MEASURE,
    OBS_SIZE,
    SD_FLOOR,
    AgentAction,
    CropEnv,
    EpisodeDone,
    NormalizationStats,
    ScenarioConfig,
    ScenarioError,
    SeasonEnv,
    assemble_observation,
    calibrate_normalization,
    initial_soil,
    make_scenario,
    measurement_cost,
)
from cropafa.weather import WeatherYear

ALL = (True,) * N_MEASURE
NONE = (False,) * N_MEASURE


def mask_of(*names):
    return tuple(f in names for f in MEASURABLE)


def run_episode(env, year, seed, actions):
    env.reset(year, seed)
    for a in actions:
        env.step(a)
    return env.record


class TestScenarios:
    def test_presets(self):
        assert make_scenario("Realistic").cost_vector == (25, 5, 20, 5, 20, 10)
        assert make_scenario("no-cost").cost_vector == (0,) * 6
        assert make_scenario("flat_cost").cost_vector == (10,) * 6
        assert make_scenario("exp-cost").cost_vector == (60,) * 6
        assert make_scenario("all-observed").n_measure_actions == 0
        assert make_scenario("none-observed").n_measure_actions == 0
        assert make_scenario("realistic").n_measure_actions == 6

    def test_defaults(self):
        sc = ScenarioConfig()
        assert (sc.beta, sc.deployment_cost, sc.n_cap, sc.weeks, sc.gamma) == (2, 10, 200, 47, 1)
        assert sc.n_levels == (0, 10, 20, 30, 40, 50, 60)

    def test_unknown_name(self):
        with pytest.raises(ScenarioError):
            make_scenario("free-lunch")

    @pytest.mark.parametrize("bad", [
        dict(cost_vector=(1,) * 5), dict(cost_vector=(-1,) + (0,) * 5),
        dict(n_levels=(10, 20)), dict(n_levels=(0, 20, 10)), dict(n_cap=0), dict(weeks=0),
        dict(observability="psychic"), dict(gamma=0.0),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ScenarioError):
            ScenarioConfig(**bad)

    def test_json_round_trip(self, tmp_path):
        sc = make_scenario("realistic", beta=3.0)
        sc.save(tmp_path / "s.json")
        assert ScenarioConfig.load(tmp_path / "s.json") == sc


class TestMeasurementCost:
    def test_examples(self):
        assert measurement_cost(NONE, make_scenario("realistic")) == 0
        assert measurement_cost(ALL, make_scenario("realistic")) == 85
        assert measurement_cost(ALL, make_scenario("flat-cost")) == 60

    def test_bad_mask(self):
        with pytest.raises(ValueError):
            measurement_cost((True,) * 5, make_scenario("realistic"))


class TestReward:
    def test_substitution_example(self, years, monkeypatch):
        # force a 500 kg/ha grain increment to check the reward formula in isolation
        sc = make_scenario("realistic")
        env = CropEnv(sc, None)
        env.reset(years[0], 1)
        real = envmod.advance_day

        def bumped(state, day, n, p, **kw):
            s = real(state, day, n, p, **kw)
            if day.day_index == 6:
                return replace(s, crop=replace(s.crop, twso=state.crop.twso + 500.0))
            return s

        monkeypatch.setattr(envmod, "advance_day", bumped)
        _, reward, _, rec = env.step(AgentAction(4, mask_of("lai", "sm")))
        assert rec.twso_delta == 500.0
        assert reward == pytest.approx(500 - 2 * 40 - 10 - (5 + 5), abs=1e-12)
        assert reward == pytest.approx(400.0, abs=1e-12)

    def test_zero_case(self, years):
        env = CropEnv(make_scenario("realistic"), None)
        env.reset(years[0], 1)
        _, reward, _, rec = env.step(AgentAction(0, NONE))
        assert rec.twso_delta == 0.0 and reward == 0.0

    def test_cap_truncation(self, years):
        env = CropEnv(make_scenario("no-cost"), None)
        env.reset(years[0], 3)
        for _ in range(3):
            env.step(AgentAction(6))          # 180
        _, reward, _, rec = env.step(AgentAction(6))
        assert rec.n_requested == 60 and rec.n_applied == 20 and rec.cum_n == 200
        assert rec.truncated
        assert reward == pytest.approx(rec.twso_delta - 2 * 20 - 10, abs=1e-12)
        _, reward, _, rec = env.step(AgentAction(6))
        assert rec.n_applied == 0 and rec.cum_n == 200 and rec.truncated
        assert reward == rec.twso_delta       # no deployment cost once nothing is applied

    def test_ledger_closes(self, years, rng):
        sc = make_scenario("realistic")
        env = CropEnv(sc, None)
        acts = [AgentAction(int(rng.integers(7)), tuple(rng.random(6) < 0.5)) for _ in range(47)]
        rec = run_episode(env, years[1], 9, acts)
        expect = (rec.final_twso - sc.beta * math.fsum(w.n_applied for w in rec.weeks)
                  - sc.deployment_cost * rec.fert_weeks - rec.total_measure_cost)
        assert abs(rec.total_reward - expect) <= 1e-9 * max(1.0, abs(expect))


class TestEpisode:
    def test_length_and_done(self, years):
        env = CropEnv(make_scenario("no-cost"), None)
        env.reset(years[0], 0)
        flags = [env.step(AgentAction(0))[2] for _ in range(47)]
        assert flags == [False] * 46 + [True]
        with pytest.raises(EpisodeDone):
            env.step(AgentAction(0))

    def test_bad_fert_index(self, years):
        env = CropEnv(make_scenario("no-cost"), None)
        env.reset(years[0], 0)
        with pytest.raises(ValueError):
            env.step(AgentAction(7))

    def test_short_weather(self, years):
        sc = make_scenario("no-cost", weeks=47)
        y = years[0]
        short = WeatherYear("short", y.irrad[:300], y.tmin[:300], y.tmax[:300], y.rain[:300])
        with pytest.raises(ValueError):
            CropEnv(sc, None).reset(short, 0)

    def test_mask_length(self):
        with pytest.raises(ValueError):
            AgentAction(0, (True,) * 5)

    def test_fertilizer_applied_first_day(self, years, params):
        env = CropEnv(make_scenario("no-cost"), None)
        env.reset(years[0], 5)
        s0 = env.state
        env.step(AgentAction(3))
        # one week of the daily model with the dose on day 0 only
        s = s0
        for i, d in enumerate(years[0].days[:7]):
            s = advance_day(s, d, 30.0 if i == 0 else 0.0, params)
        assert env.state == s

    def test_csv_export(self, years):
        env = CropEnv(make_scenario("realistic"), None)
        rec = run_episode(env, years[0], 1, [AgentAction(1, mask_of("lai"))] * 47)
        lines = rec.to_csv().splitlines()
        assert lines[0] == ("week,dvs,twso,tagp,lai,sm,navail,nuptake,n_applied,cum_n,"
                            "mask_bits,measure_cost,reward")
        assert len(lines) == 48
        assert lines[1].split(",")[10] == "010000"
        assert "np.float64" not in lines[1]


class TestReset:
    def test_deterministic(self, years):
        a = CropEnv(make_scenario("no-cost"), None)
        b = CropEnv(make_scenario("no-cost"), None)
        oa, ob = a.reset(years[0], 77), b.reset(years[0], 77)
        assert np.array_equal(oa, ob) and a.state == b.state
        assert a.state.crop.dvs == -0.1 and a.state.crop.tagp == 0 and a.state.crop.lai == 0

    def test_clip_boundary(self, params):
        sc = ScenarioConfig()
        soil = initial_soil((-10.0, -10.0), sc, params)
        assert soil.navail == 0.0 and soil.sm == params.sm_wp
        soil = initial_soil((150.0, 150.0), sc, params)
        assert soil.navail == 100.0 and soil.sm == params.sm_fc
        soil = initial_soil((50.0, 42.0), sc, params)
        assert soil.navail == 42.0
        assert soil.sm == pytest.approx((params.sm_wp + params.sm_fc) / 2, rel=1e-12)

    def test_draw_mean(self, years):
        env = CropEnv(make_scenario("no-cost"), None)
        draws = []
        for seed in range(1000):
            env.reset(years[0], seed)
            draws.extend(env.record.soil_draws)
        m = np.mean(draws[0::2])
        n = np.mean(draws[1::2])
        assert abs(m - 15) < 1.5 and abs(n - 15) < 1.5

    def test_reset_observation_unmeasured(self, years, stats):
        obs = CropEnv(make_scenario("realistic"), stats).reset(years[0], 0)
        assert obs.shape == (OBS_SIZE,)
        assert np.all(obs[MEASURABLE_SLOTS] == 0) and np.all(obs[N_FEATURES:] == 0)

    def test_season_env_draws_from_set(self, years, stats):
        env = SeasonEnv(make_scenario("realistic"), stats, years, seed=3)
        labels = set()
        for _ in range(30):
            env.reset()
            labels.add(env.record.weather_label)
        assert labels <= {y.label for y in years} and len(labels) > 1


class TestObservation:
    def _week(self, years):
        s = initial_state(SoilState(0.25, 30.0))
        states = []
        p = load_params()
        for d in years[0].days[:7]:
            s = advance_day(s, d, 0.0, p)
            states.append(s)
        return states, years[0].days[:7]

    def test_full_mask(self, years, stats, rng):
        states, days = self._week(years)
        obs = assemble_observation(states, days, ALL, stats, rng)
        assert obs.shape == (16,)
        assert np.all(obs[N_FEATURES:] == 1)
        assert np.isclose(obs[0], (states[-1].crop.dvs - stats.mean[0]) / stats.sd[0])
        w = FEATURES.index("irrad")
        assert np.isclose(obs[w], (np.mean([d.irrad for d in days]) - stats.mean[w]) / stats.sd[w])

    def test_zero_mask(self, years, stats, rng):
        states, days = self._week(years)
        obs = assemble_observation(states, days, NONE, stats, rng)
        assert np.all(obs[1:7] == 0) and np.all(obs[N_FEATURES:] == 0)
        assert obs[0] != 0 and np.all(obs[7:10] != 0)

    def test_partial_mask(self, years, stats, rng):
        states, days = self._week(years)
        obs = assemble_observation(states, days, mask_of("lai", "random"), stats, rng)
        assert list(obs[N_FEATURES:]) == [0, 1, 0, 0, 0, 1]
        assert obs[1] == 0 and obs[3] == 0 and obs[2] != 0

    def test_sd_floor(self, years, rng):
        states, days = self._week(years)
        st = NormalizationStats(np.zeros(N_FEATURES), np.zeros(N_FEATURES))
        assert np.all(st.sd == SD_FLOOR)
        assert np.all(np.isfinite(assemble_observation(states, days, ALL, st, rng)))

    def test_errors(self, years, rng):
        states, days = self._week(years)
        with pytest.raises(ValueError):
            assemble_observation(states[:6], days, ALL, NormalizationStats.identity(), rng)
        with pytest.raises(ValueError):
            assemble_observation(states, days, ALL, None, rng)

    def test_observability_modes(self, years, stats):
        for name, expect in (("all-observed", 1.0), ("none-observed", 0.0)):
            env = CropEnv(make_scenario(name), stats)
            env.reset(years[0], 0)
            for _ in range(47):
                obs, *_ = env.step(AgentAction(2))
                assert np.all(obs[N_FEATURES:] == expect)
                if expect == 0:
                    assert np.all(obs[MEASURABLE_SLOTS] == 0)
            assert env.record.total_measure_cost == 0

    def test_random_slot_independent_of_measuring(self, years):
        # the random stream advances every week, measured or not
        a, b = CropEnv(make_scenario("no-cost"), None), CropEnv(make_scenario("no-cost"), None)
        ra = run_episode(a, years[0], 4, [AgentAction(0, ALL)] * 47)
        rb = run_episode(b, years[0], 4, [AgentAction(0, NONE if k % 2 else ALL) for k in range(47)])
        ri = FEATURES.index("random")
        assert [w.raw_features[ri] for w in ra.weeks] == [w.raw_features[ri] for w in rb.weeks]


class TestCalibration:
    def test_deterministic(self, years):
        sc = make_scenario("realistic")
        assert calibrate_normalization(sc, years, 2, 4) == calibrate_normalization(sc, years, 2, 4)

    def test_self_consistent(self, years):
        stats, samples = calibrate_normalization(make_scenario("no-cost"), years, 50, 1,
                                                 return_samples=True)
        z = stats.standardize(samples)
        assert np.all(np.abs(z.mean(axis=0)) < 0.1)
        assert np.all((z.std(axis=0) > 0.9) & (z.std(axis=0) < 1.1))

    def test_degenerate_world(self, params):
        n = 329
        # no light, no heat, no rain: crop features never move
        y = WeatherYear("dark", np.zeros(n), np.full(n, params.t_base), np.full(n, params.t_base),
                        np.zeros(n))
        stats = calibrate_normalization(make_scenario("no-cost"), [y], 1, 0)
        for f in ("dvs", "tagp", "lai", "irrad", "rain"):
            assert stats.sd[FEATURES.index(f)] == SD_FLOOR

    def test_json_round_trip(self, stats, tmp_path):
        stats.save(tmp_path / "st.json")
        assert NormalizationStats.load(tmp_path / "st.json") == stats

    def test_errors(self, years):
        with pytest.raises(ValueError):
            calibrate_normalization(make_scenario("no-cost"), years, 0, 0)
        with pytest.raises(ValueError):
            calibrate_normalization(make_scenario("no-cost"), [], 1, 0)


def test_measurement_does_not_touch_state(years, rng):
    sc = make_scenario("realistic")
    ferts = rng.integers(7, size=47)
    a, b = CropEnv(sc, None), CropEnv(sc, None)
    ra = run_episode(a, years[2], 8, [AgentAction(int(f), NONE) for f in ferts])
    rb = run_episode(b, years[2], 8, [AgentAction(int(f), tuple(rng.random(6) < .5)) for f in ferts])
    assert [w.state for w in ra.weeks] == [w.state for w in rb.weeks]
