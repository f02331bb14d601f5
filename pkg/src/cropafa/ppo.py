"""Recurrent PPO: rollout collection, GAE, clipped-surrogate updates with Adam.

Rollouts keep the LSTM state across steps and zero it at episode ends.
Each env's horizon is cut into sequences at episode boundaries; each
sequence stores the hidden state it started from, so log-probabilities
can be replayed exactly during the update. Minibatches are made of whole
sequences.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agent import ActorCritic, HiddenState, distribution_grads, log_prob_and_entropy, sample_action
from .env import MEASURABLE, NormalizationStats, ScenarioConfig, SeasonEnv

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ("step", "episodes", "mean_return", "mean_yield", "mean_n", "measure_counts_json")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    total_steps: int = 100_000
    n_envs: int = 4
    horizon: int = 94
    minibatch_sequences: int = 2
    epochs: int = 10
    clip_range: float = 0.2
    gae_lambda: float = 0.95
    train_gamma: float = 0.99
    value_coeff: float = 0.5
    entropy_coeff: float = 0.0
    max_grad_norm: float = 0.5
    # rewards are multiplied by this before GAE; keeps critic targets O(1)
    reward_scale: float = 1e-3
    hidden: int = 256
    layers: int = 2
    adam_eps: float = 1e-5
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("learning_rate", "total_steps", "n_envs", "horizon", "minibatch_sequences",
                     "epochs", "max_grad_norm", "reward_scale", "hidden", "layers", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.clip_range < 1:
            raise ValueError("clip_range must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1 or not 0 < self.train_gamma <= 1:
            raise ValueError("gae_lambda must lie in [0, 1] and train_gamma in (0, 1]")
        for name in ("value_coeff", "entropy_coeff", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sequence_:
    env: int
    start: int
    end: int
    hidden: HiddenState


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    fert: np.ndarray
    measure: np.ndarray
    log_prob: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    sequences: list[Sequence_]
    episodes: list[dict] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.rewards.size


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates over (n_envs, horizon) arrays.

    ``dones[e, t]`` marks that step t ended an episode, so nothing is
    bootstrapped past it. ``last_values`` are the critic's values of the
    observations following the final step. Returns ``(advantages, returns)``
    without normalization.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    E, T = rewards.shape
    adv = np.zeros((E, T))
    next_adv = np.zeros(E)
    next_val = np.asarray(last_values, dtype=np.float64).copy()
    for t in reversed(range(T)):
        live = 1.0 - dones[:, t]
        delta = rewards[:, t] + gamma * next_val * live - values[:, t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[:, t] = next_adv
        next_val = values[:, t]
    return adv, adv + values


def normalize_advantages(adv, eps: float = 1e-8):
    return (adv - adv.mean()) / (adv.std() + eps)


class Adam:
    def __init__(self, param_groups: dict[str, dict[str, np.ndarray]], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = param_groups
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {g: {k: np.zeros_like(v) for k, v in ps.items()} for g, ps in param_groups.items()}
        self.v = {g: {k: np.zeros_like(v) for k, v in ps.items()} for g, ps in param_groups.items()}

    def step(self, grads: dict[str, dict[str, np.ndarray]]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        step_size = self.lr / c1
        eps = self.eps * math.sqrt(c2)
        for g, gg in grads.items():
            ps, ms, vs = self.groups[g], self.m[g], self.v[g]
            for k, grad in gg.items():
                m, v = ms[k], vs[k]
                m *= self.b1
                m += (1.0 - self.b1) * grad
                v *= self.b2
                np.multiply(grad, grad, out=grad)
                grad *= 1.0 - self.b2
                v += grad
                # m_hat / (sqrt(v_hat) + eps) == (m / c1) * sqrt(c2) / (sqrt(v) + eps * sqrt(c2))
                np.sqrt(v, out=grad)
                grad += eps
                np.divide(m, grad, out=grad)
                grad *= step_size * math.sqrt(c2)
                ps[k] -= grad


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


class RolloutCollector:
    """Steps a fixed set of environments and keeps their episodes and
    hidden states alive between calls to :meth:`collect`."""

    def __init__(self, policy: ActorCritic, envs: Sequence, seed: int):
        self.envs = list(envs)
        self.rng = np.random.default_rng(seed)
        self.obs = np.stack([env.reset() for env in self.envs])
        self.hidden = policy.initial_hidden(len(self.envs))
        self.episode_start = np.ones(len(self.envs), dtype=bool)
        self.running_return = np.zeros(len(self.envs))
        self.running_measures = np.zeros((len(self.envs), len(MEASURABLE)))
        self.total_steps = 0
        self.total_episodes = 0

    def collect(self, policy: ActorCritic, horizon: int) -> RolloutBuffer:
        E = len(self.envs)
        M = policy.n_measure
        obs_buf = np.zeros((E, horizon, policy.obs_size))
        fert = np.zeros((E, horizon), dtype=np.int64)
        meas = np.zeros((E, horizon, M), dtype=np.int8)
        logp = np.zeros((E, horizon))
        values = np.zeros((E, horizon))
        rewards = np.zeros((E, horizon))
        dones = np.zeros((E, horizon), dtype=bool)
        open_seq: list[Sequence_ | None] = [None] * E
        sequences: list[Sequence_] = []
        episodes = []
        for t in range(horizon):
            for e in range(E):
                if open_seq[e] is None:
                    open_seq[e] = Sequence_(e, t, t, self.hidden.select(slice(e, e + 1)).copy())
            out = policy.forward(self.obs, self.hidden)
            actions, lp, _ = sample_action(out, self.rng)
            obs_buf[:, t] = self.obs
            fert[:, t] = actions.fert
            meas[:, t] = actions.measure
            logp[:, t] = lp
            values[:, t] = out.value
            self.hidden = out.next_hidden
            agent_actions = actions.to_agent_actions()
            for e, env in enumerate(self.envs):
                obs, reward, done, _ = env.step(agent_actions[e])
                rewards[e, t] = reward
                dones[e, t] = done
                self.running_return[e] += reward
                if M:
                    self.running_measures[e] += actions.measure[e]
                if done:
                    episodes.append(self._episode_summary(e, env))
                    self.running_return[e] = 0.0
                    self.running_measures[e] = 0.0
                    obs = env.reset()
                    self.hidden.reset(e)
                    seq = open_seq[e]
                    seq.end = t + 1
                    sequences.append(seq)
                    open_seq[e] = None
                self.obs[e] = obs
        for e in range(E):
            if open_seq[e] is not None:
                open_seq[e].end = horizon
                sequences.append(open_seq[e])
        last_values = policy.forward(self.obs, self.hidden).value
        self.total_steps += E * horizon
        self.total_episodes += len(episodes)
        sequences.sort(key=lambda s: (s.env, s.start))
        return RolloutBuffer(obs_buf, fert, meas, logp, values, rewards, dones,
                             np.asarray(last_values, dtype=np.float64), sequences, episodes)

    def _episode_summary(self, e, env):
        rec = getattr(env, "record", None)
        summary = {"return": float(self.running_return[e]),
                   "measure_counts": self.running_measures[e].tolist()}
        if rec is not None:
            summary.update(yield_kg_ha=rec.final_twso, total_n=rec.total_n,
                           measure_counts=rec.measure_counts().tolist())
        return summary


def collect_rollouts(policy: ActorCritic, envs: Sequence, config: TrainConfig,
                     collector: RolloutCollector | None = None) -> RolloutBuffer:
    collector = collector or RolloutCollector(policy, envs, config.seed)
    return collector.collect(policy, config.horizon)


def _minibatch(buffer: RolloutBuffer, seqs: list[Sequence_], adv, returns):
    T = max(s.end - s.start for s in seqs)
    B = len(seqs)
    D = buffer.obs.shape[-1]
    M = buffer.measure.shape[-1]
    obs = np.zeros((T, B, D))
    fert = np.zeros((T, B), dtype=np.int64)
    meas = np.zeros((T, B, M), dtype=np.int8)
    old_logp = np.zeros((T, B))
    a = np.zeros((T, B))
    ret = np.zeros((T, B))
    valid = np.zeros((T, B), dtype=bool)
    for b, s in enumerate(seqs):
        n = s.end - s.start
        sl = slice(s.start, s.end)
        obs[:n, b] = buffer.obs[s.env, sl]
        fert[:n, b] = buffer.fert[s.env, sl]
        meas[:n, b] = buffer.measure[s.env, sl]
        old_logp[:n, b] = buffer.log_prob[s.env, sl]
        a[:n, b] = adv[s.env, sl]
        ret[:n, b] = returns[s.env, sl]
        valid[:n, b] = True
    hidden = HiddenState(*(np.concatenate([getattr(s.hidden, k) for s in seqs], axis=1)
                           for k in ("actor_h", "actor_c", "critic_h", "critic_c")))
    return obs, fert, meas, old_logp, a, ret, valid, hidden


def ppo_loss_and_grads(policy: ActorCritic, batch, config: TrainConfig, normalize=True):
    """Clipped-surrogate loss on one minibatch and its exact gradients."""
    obs, fert, meas, old_logp, adv, ret, valid, hidden = batch
    (fl, ml, v), caches = policy.forward_sequence(obs, hidden)
    logp, ent = log_prob_and_entropy(fl, ml, fert, meas)
    n = valid.sum()
    w = valid / n
    a = adv.copy()
    if normalize:
        av = adv[valid]
        a[valid] = (av - av.mean()) / (av.std() + 1e-8)
    a[~valid] = 0.0
    ratio = np.exp(np.where(valid, logp - old_logp, 0.0))
    lo, hi = 1.0 - config.clip_range, 1.0 + config.clip_range
    surr1 = ratio * a
    surr2 = np.clip(ratio, lo, hi) * a
    policy_loss = -np.sum(w * np.minimum(surr1, surr2))
    verr = np.where(valid, v - ret, 0.0)
    value_loss = np.sum(w * verr * verr)
    entropy = np.sum(w * ent)
    total = policy_loss + config.value_coeff * value_loss - config.entropy_coeff * entropy
    if not math.isfinite(total):
        raise TrainingDiverged(f"non-finite loss: policy={policy_loss} value={value_loss} "
                               f"entropy={entropy}")

    d_logp = np.where(surr1 <= surr2, -w * a * ratio, 0.0)
    d_ent = -config.entropy_coeff * w
    dg = distribution_grads(fl, ml, fert, meas)
    d_fert = d_logp[..., None] * dg["logp_fert"] + d_ent[..., None] * dg["ent_fert"]
    d_meas = d_logp[..., None] * dg["logp_measure"] + d_ent[..., None] * dg["ent_measure"]
    d_value = config.value_coeff * 2.0 * w * verr
    grads = policy.backward(caches, d_fert, d_meas, d_value)
    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "total_loss": float(total),
        "approx_kl": float(np.sum(w * (old_logp - logp))),
        "clip_fraction": float(np.sum(w * (np.abs(ratio - 1.0) > config.clip_range))),
    }
    return total, grads, stats


def ppo_update(policy: ActorCritic, buffer: RolloutBuffer, config: TrainConfig,
               optimizer: Adam, rng: np.random.Generator) -> dict:
    adv, returns = compute_gae(buffer.rewards * config.reward_scale, buffer.values, buffer.dones,
                               buffer.last_values, config.train_gamma, config.gae_lambda)
    seqs = buffer.sequences
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(seqs))
        for i in range(0, len(order), config.minibatch_sequences):
            chunk = [seqs[j] for j in order[i:i + config.minibatch_sequences]]
            batch = _minibatch(buffer, chunk, adv, returns)
            _, grads, stats = ppo_loss_and_grads(policy, batch, config)
            stats["grad_norm_actor"] = clip_grad_norm(grads["actor"], config.max_grad_norm)
            stats["grad_norm_critic"] = clip_grad_norm(grads["critic"], config.max_grad_norm)
            optimizer.step(grads)
            for k, val in stats.items():
                totals[k] = totals.get(k, 0.0) + val
            count += 1
    out = {k: val / count for k, val in totals.items()}
    out["explained_variance"] = explained_variance(buffer.values, returns)
    return out


def explained_variance(values, returns) -> float:
    """1 - Var(returns - values) / Var(returns); 1 is a perfect critic."""
    var = float(np.var(returns))
    return float("nan") if var == 0 else 1.0 - float(np.var(returns - values)) / var


def make_optimizer(policy: ActorCritic, config: TrainConfig) -> Adam:
    return Adam({name: net.params for name, net in policy.nets.items()},
                lr=config.learning_rate, eps=config.adam_eps)


def _fmt(x):
    return "" if x is None else repr(float(x))


def log_row(collector: RolloutCollector, episodes: list[dict]) -> dict:
    if episodes:
        mean_ret = float(np.mean([e["return"] for e in episodes]))
        ylds = [e["yield_kg_ha"] for e in episodes if "yield_kg_ha" in e]
        ns = [e["total_n"] for e in episodes if "total_n" in e]
        counts = np.mean([e["measure_counts"] for e in episodes], axis=0)
        counts_d = {f: round(float(c), 6) for f, c in zip(MEASURABLE, counts)}
    else:
        mean_ret, ylds, ns, counts_d = None, [], [], {}
    return {
        "step": collector.total_steps,
        "episodes": collector.total_episodes,
        "mean_return": mean_ret,
        "mean_yield": float(np.mean(ylds)) if ylds else None,
        "mean_n": float(np.mean(ns)) if ns else None,
        "measure_counts_json": json.dumps(counts_d, sort_keys=True),
    }


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAIN_LOG_HEADER)
    for r in rows:
        w.writerow([r["step"], r["episodes"], _fmt(r["mean_return"]), _fmt(r["mean_yield"]),
                    _fmt(r["mean_n"]), r["measure_counts_json"]])
    return buf.getvalue()


def train_on_envs(envs: Sequence, config: TrainConfig, policy: ActorCritic | None = None,
                  on_update: Callable[[int, ActorCritic, dict], None] | None = None):
    """Alternate collection and updates until ``total_steps`` env steps.

    Returns ``(policy, log_rows)``. Seeds for the network, the action
    sampler and the minibatch shuffler are all derived from ``config.seed``.
    """
    net_seed, sample_seed, shuffle_seed = np.random.SeedSequence(config.seed).generate_state(3)
    env0 = envs[0]
    if policy is None:
        policy = ActorCritic(env0.obs_size, env0.n_fert, env0.n_measure, config.hidden,
                             config.layers, seed=int(net_seed))
    optimizer = make_optimizer(policy, config)
    collector = RolloutCollector(policy, envs, int(sample_seed))
    rng = np.random.default_rng(int(shuffle_seed))
    rows = []
    update = 0
    while collector.total_steps < config.total_steps:
        buffer = collector.collect(policy, config.horizon)
        stats = ppo_update(policy, buffer, config, optimizer, rng)
        update += 1
        row = log_row(collector, buffer.episodes)
        row["update_stats"] = stats
        rows.append(row)
        log.info("step %d episodes %d return %s loss %.4g", row["step"], row["episodes"],
                 row["mean_return"], stats["total_loss"])
        if on_update is not None:
            on_update(update, policy, row)
    return policy, rows


def make_training_envs(scenario: ScenarioConfig, stats: NormalizationStats, weather_set,
                       config: TrainConfig, params=None) -> list[SeasonEnv]:
    seeds = np.random.SeedSequence([config.seed, 1]).generate_state(config.n_envs)
    return [SeasonEnv(scenario, stats, weather_set, int(s), params) for s in seeds]


def train(scenario: ScenarioConfig, weather_set, config: TrainConfig, stats: NormalizationStats,
          params=None, out_dir: str | Path | None = None, extra: dict | None = None):
    """Train on ``weather_set`` (one year drawn uniformly per episode).

    With ``out_dir`` set, writes ``train_log.csv`` and ``checkpoint.npz``
    (plus ``checkpoint_<update>.npz`` every ``checkpoint_every`` updates).
    The checkpoint metadata carries the scenario, the normalization stats
    and the train config, plus anything in ``extra``.
    Returns ``(policy, log_rows)``.
    """
    envs = make_training_envs(scenario, stats, weather_set, config, params)
    out = Path(out_dir) if out_dir is not None else None
    meta = {"scenario": scenario.to_dict(), "stats": stats.to_dict(),
            "train_config": config.to_dict(), **(extra or {})}

    def on_update(update, policy, row):
        if out is not None and config.checkpoint_every and update % config.checkpoint_every == 0:
            policy.save(out / f"checkpoint_{update:05d}.npz", extra=meta)

    policy, rows = train_on_envs(envs, config, on_update=on_update)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "train_log.csv", format_log(rows))
        policy.save(out / "checkpoint.npz", extra=meta)
    return policy, rows


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def greedy_return(policy: ActorCritic, env, episodes: int = 1) -> float:
    """Mean return of the mode action over ``episodes`` episodes of ``env``."""
    rng = np.random.default_rng(0)
    total = 0.0
    for _ in range(episodes):
        obs = env.reset()
        hidden = policy.initial_hidden(1)
        done = False
        while not done:
            out = policy.forward(obs[None], hidden)
            actions, _, _ = sample_action(out, rng, greedy=True)
            obs, r, done, _ = env.step(actions.to_agent_actions()[0])
            total += r
            hidden = out.next_hidden
    return total / episodes
