"""Recurrent actor-critic networks in numpy with exact backpropagation through time.

Actor and critic are separate networks of identical shape::

    obs -> tanh(obs @ W_in + b_in) -> LSTM -> LSTM -> linear head

The actor head emits fertilizer logits (categorical) followed by measure
logits (independent Bernoulli flags); the critic head emits one value.
Everything runs in float64.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import N_MEASURE, AgentAction

CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def orthogonal(shape, rng, gain=1.0):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class RecurrentNet:
    """Input projection, stacked LSTM layers and a linear head.

    Gate order inside the 4H blocks is input, forget, cell, output.
    """

    def __init__(self, obs_size: int, n_out: int, hidden: int = 256, layers: int = 2,
                 rng: np.random.Generator | None = None, head_scale: float = 0.01):
        self.obs_size = obs_size
        self.n_out = n_out
        self.hidden = hidden
        self.layers = layers
        rng = rng if rng is not None else np.random.default_rng(0)
        H = hidden
        p = {"W_in": orthogonal((obs_size, H), rng), "b_in": np.zeros(H)}
        for l in range(layers):
            p[f"Wx{l}"] = np.concatenate([orthogonal((H, H), rng) for _ in range(4)], axis=1)
            p[f"Wh{l}"] = np.concatenate([orthogonal((H, H), rng) for _ in range(4)], axis=1)
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            p[f"b{l}"] = b
        p["W_out"] = rng.uniform(-head_scale, head_scale, (H, n_out))
        p["b_out"] = np.zeros(n_out)
        self.params = p

    def param_names(self):
        return list(self.params)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_state(self, batch: int):
        z = np.zeros((self.layers, batch, self.hidden))
        return z, z.copy()

    def forward(self, x, h0, c0, keep_cache=True):
        """Run a (T, B, obs_size) sequence from initial states of shape (L, B, H).

        Returns ``(y, hT, cT, cache)`` with ``y`` of shape (T, B, n_out).
        """
        p = self.params
        H = self.hidden
        T, B, _ = x.shape
        u = np.tanh(x @ p["W_in"] + p["b_in"])
        inp = u
        hT = np.empty_like(h0)
        cT = np.empty_like(c0)
        layer_caches = []
        for l in range(self.layers):
            Wh = p[f"Wh{l}"]
            xz = inp @ p[f"Wx{l}"] + p[f"b{l}"]
            h, c = h0[l], c0[l]
            hs = np.empty((T, B, H))
            if keep_cache:
                gates = np.empty((T, B, 4 * H))
                cs = np.empty((T + 1, B, H))
                tcs = np.empty((T, B, H))
                cs[0] = c
            for t in range(T):
                z = xz[t] + h @ Wh
                # sigmoid over every block, then overwrite the cell block with tanh
                s = sigmoid(z)
                s[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
                c = s[:, H:2 * H] * c + s[:, :H] * s[:, 2 * H:3 * H]
                tc = np.tanh(c)
                h = s[:, 3 * H:] * tc
                hs[t] = h
                if keep_cache:
                    gates[t] = s
                    cs[t + 1] = c
                    tcs[t] = tc
            hT[l] = h
            cT[l] = c
            if keep_cache:
                layer_caches.append((inp, h0[l], hs, gates, cs, tcs))
            inp = hs
        y = inp @ p["W_out"] + p["b_out"]
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("non-finite network output; parameters have likely diverged")
        cache = (x, u, layer_caches, inp) if keep_cache else None
        return y, hT, cT, cache

    def backward(self, cache, dy):
        """Exact parameter gradients of ``sum(dy * y)`` for the cached forward pass.

        The initial hidden states are treated as constants.
        """
        p = self.params
        H = self.hidden
        x, u, layer_caches, top = cache
        T, B, _ = dy.shape
        grads = {}
        grads["W_out"] = top.reshape(T * B, H).T @ dy.reshape(T * B, -1)
        grads["b_out"] = dy.sum(axis=(0, 1))
        dinp = dy @ p["W_out"].T
        for l in reversed(range(self.layers)):
            inp, h_init, hs, gates, cs, tcs = layer_caches[l]
            Wh = p[f"Wh{l}"]
            WhT = Wh.T
            i = gates[..., :H]
            f = gates[..., H:2 * H]
            g = gates[..., 2 * H:3 * H]
            o = gates[..., 3 * H:]
            # local derivatives depend only on the forward cache, so build them up front
            k_c = o * (1.0 - tcs * tcs)
            k_o = tcs * o * (1.0 - o)
            k_ifg = np.concatenate([g * i * (1.0 - i), cs[:-1] * f * (1.0 - f), i * (1.0 - g * g)],
                                   axis=-1).reshape(T, B, 3, H)
            dz_all = np.empty((T, B, 4 * H))
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            for t in reversed(range(T)):
                dh = dinp[t] + dh_next
                dc = dc_next + dh * k_c[t]
                dz = dz_all[t]
                np.multiply(dc[:, None, :], k_ifg[t], out=dz[:, :3 * H].reshape(B, 3, H))
                np.multiply(dh, k_o[t], out=dz[:, 3 * H:])
                dc_next = dc * f[t]
                dh_next = dz @ WhT
            h_prev = np.concatenate([h_init[None], hs[:-1]], axis=0)
            dz2 = dz_all.reshape(T * B, 4 * H)
            grads[f"Wh{l}"] = h_prev.reshape(T * B, H).T @ dz2
            grads[f"Wx{l}"] = inp.reshape(T * B, -1).T @ dz2
            grads[f"b{l}"] = dz2.sum(axis=0)
            dinp = dz_all @ p[f"Wx{l}"].T
        dpre = dinp * (1.0 - u * u)
        grads["W_in"] = x.reshape(T * B, -1).T @ dpre.reshape(T * B, H)
        grads["b_in"] = dpre.sum(axis=(0, 1))
        for k, v in grads.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"non-finite gradient in {k}")
        return grads

    def descriptor(self):
        return {"obs_size": self.obs_size, "n_out": self.n_out, "hidden": self.hidden,
                "layers": self.layers}


@dataclass
class HiddenState:
    """Per-layer (h, c) of the actor and critic, each shaped (L, B, H)."""

    actor_h: np.ndarray
    actor_c: np.ndarray
    critic_h: np.ndarray
    critic_c: np.ndarray

    def select(self, idx):
        return HiddenState(self.actor_h[:, idx], self.actor_c[:, idx],
                           self.critic_h[:, idx], self.critic_c[:, idx])

    def copy(self):
        return HiddenState(self.actor_h.copy(), self.actor_c.copy(),
                           self.critic_h.copy(), self.critic_c.copy())

    def reset(self, idx):
        """Zero the states of batch entries ``idx`` in place."""
        for a in (self.actor_h, self.actor_c, self.critic_h, self.critic_c):
            a[:, idx] = 0.0


@dataclass
class PolicyOutput:
    fert_logits: np.ndarray
    measure_logits: np.ndarray
    value: np.ndarray
    next_hidden: HiddenState


class ActorCritic:
    def __init__(self, obs_size: int, n_fert: int = 7, n_measure: int = N_MEASURE,
                 hidden: int = 256, layers: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.obs_size = obs_size
        self.n_fert = n_fert
        self.n_measure = n_measure
        self.actor = RecurrentNet(obs_size, n_fert + n_measure, hidden, layers, rng)
        self.critic = RecurrentNet(obs_size, 1, hidden, layers, rng)

    @property
    def nets(self):
        return {"actor": self.actor, "critic": self.critic}

    def initial_hidden(self, batch: int = 1) -> HiddenState:
        ah, ac = self.actor.zero_state(batch)
        ch, cc = self.critic.zero_state(batch)
        return HiddenState(ah, ac, ch, cc)

    def forward(self, obs, hidden: HiddenState) -> PolicyOutput:
        """One step for a batch of observations (B, obs_size) or a single one."""
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        x = obs.reshape(1, -1, self.obs_size)
        if x.shape[1] != hidden.actor_h.shape[1]:
            raise ValueError("observation batch does not match hidden state batch")
        ya, ah, ac, _ = self.actor.forward(x, hidden.actor_h, hidden.actor_c, keep_cache=False)
        yc, ch, cc, _ = self.critic.forward(x, hidden.critic_h, hidden.critic_c, keep_cache=False)
        fert, meas, value = ya[0, :, :self.n_fert], ya[0, :, self.n_fert:], yc[0, :, 0]
        if single:
            fert, meas, value = fert[0], meas[0], value[0]
        return PolicyOutput(fert, meas, value, HiddenState(ah, ac, ch, cc))

    def forward_sequence(self, obs_seq, hidden: HiddenState):
        """Forward over (T, B, obs_size) keeping caches for :meth:`backward`."""
        ya, _, _, cache_a = self.actor.forward(obs_seq, hidden.actor_h, hidden.actor_c)
        yc, _, _, cache_c = self.critic.forward(obs_seq, hidden.critic_h, hidden.critic_c)
        return (ya[..., :self.n_fert], ya[..., self.n_fert:], yc[..., 0]), (cache_a, cache_c)

    def backward(self, caches, d_fert, d_measure, d_value):
        cache_a, cache_c = caches
        dya = np.concatenate([d_fert, d_measure], axis=-1)
        return {"actor": self.actor.backward(cache_a, dya),
                "critic": self.critic.backward(cache_c, d_value[..., None])}

    def descriptor(self):
        return {"obs_size": self.obs_size, "n_fert": self.n_fert, "n_measure": self.n_measure,
                "hidden": self.actor.hidden, "layers": self.actor.layers}

    def state_arrays(self):
        out = {}
        for name, net in self.nets.items():
            for k, v in net.params.items():
                out[f"{name}.{k}"] = v
        return out

    def save(self, path, extra: dict | None = None) -> str:
        """Write an ``.npz`` checkpoint; returns its sha256."""
        meta = {"format": "cropafa-checkpoint", "version": CHECKPOINT_VERSION,
                "architecture": self.descriptor(), "extra": extra or {}}
        arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
        arrays.update(sorted(self.state_arrays().items()))
        data = _npz_bytes(arrays)
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "ActorCritic":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != "cropafa-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
            a = meta["architecture"]
            model = cls(a["obs_size"], a["n_fert"], a["n_measure"], a["hidden"], a["layers"])
            for name, net in model.nets.items():
                for k in net.params:
                    arr = z[f"{name}.{k}"]
                    if arr.shape != net.params[k].shape:
                        raise ValueError(f"{path}: shape mismatch for {name}.{k}")
                    net.params[k] = arr.astype(np.float64)
            model.checkpoint_meta = meta
        return model


@dataclass
class ActionBatch:
    fert: np.ndarray
    measure: np.ndarray

    def to_agent_actions(self) -> list[AgentAction]:
        out = []
        for b in range(len(self.fert)):
            mask = [False] * N_MEASURE
            for j, m in enumerate(self.measure[b]):
                mask[j] = bool(m)
            out.append(AgentAction(int(self.fert[b]), tuple(mask)))
        return out


def log_prob_and_entropy(fert_logits, measure_logits, fert, measure):
    """Log-probability of the joint action and entropy of the factored distribution.

    Works on any leading batch shape; ``fert`` holds integer indices and
    ``measure`` 0/1 flags.
    """
    lsm = log_softmax(fert_logits)
    lp_f = np.take_along_axis(lsm, np.asarray(fert)[..., None], axis=-1)[..., 0]
    probs = np.exp(lsm)
    ent_f = -(probs * lsm).sum(axis=-1)
    z = measure_logits
    a = np.asarray(measure, dtype=np.float64)
    lp_m = (a * z - softplus(z)).sum(axis=-1)
    ent_m = (softplus(z) - z * sigmoid(z)).sum(axis=-1)
    return lp_f + lp_m, ent_f + ent_m


def sample_action(out: PolicyOutput, rng: np.random.Generator, greedy: bool = False):
    """Draw a joint action; returns ``(actions, log_prob, entropy)``.

    For an unbatched output ``actions`` is one :class:`AgentAction`,
    otherwise an :class:`ActionBatch`. ``greedy`` picks the mode instead.
    """
    fl = np.atleast_2d(out.fert_logits)
    ml = np.atleast_2d(out.measure_logits)
    if ml.shape[0] != fl.shape[0]:
        ml = ml.reshape(fl.shape[0], -1)
    B = fl.shape[0]
    if greedy:
        fert = fl.argmax(axis=-1)
        measure = (ml > 0.0).astype(np.int8)
    else:
        probs = np.exp(log_softmax(fl))
        u = rng.random(B)
        fert = np.minimum((np.cumsum(probs, axis=-1) < u[:, None]).sum(axis=-1), fl.shape[1] - 1)
        measure = (rng.random(ml.shape) < sigmoid(ml)).astype(np.int8)
    logp, ent = log_prob_and_entropy(fl, ml, fert, measure)
    batch = ActionBatch(fert, measure)
    if np.ndim(out.fert_logits) == 1:
        return batch.to_agent_actions()[0], float(logp[0]), float(ent[0])
    return batch, logp, ent


def action_arrays(action: AgentAction, n_measure: int):
    """Inverse of :meth:`ActionBatch.to_agent_actions` for one action."""
    return action.fert_index, np.array(action.measure_mask[:n_measure], dtype=np.int8)


def distribution_grads(fert_logits, measure_logits, fert, measure):
    """d log_prob / d logits and d entropy / d logits for the factored distribution."""
    lsm = log_softmax(fert_logits)
    p = np.exp(lsm)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, np.asarray(fert)[..., None], 1.0, axis=-1)
    ent_f = -(p * lsm).sum(axis=-1, keepdims=True)
    s = sigmoid(measure_logits)
    a = np.asarray(measure, dtype=np.float64)
    return {
        "logp_fert": onehot - p,
        "logp_measure": a - s,
        "ent_fert": -p * (lsm + ent_f),
        "ent_measure": -s * (1.0 - s) * measure_logits,
    }


def _npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    """An ``np.load``-readable archive with fixed entry timestamps, so equal
    arrays always give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)
    return buf.getvalue()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
