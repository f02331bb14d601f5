"""Oracles shared by the unit and acceptance tests."""
import numpy as np

from cropafa.agent import RecurrentNet

# acceptance tests report (passed, detail) per criterion here; conftest prints them at the end
ACCEPTANCE_RESULTS = {}

# relative errors are taken against max(|analytic|, |numeric|, FD_FLOOR) so that
# entries whose true gradient is ~0 are judged on absolute error instead
FD_FLOOR = 1e-6


def random_small_net(seed, obs_size=5, n_out=3, hidden=8, layers=2):
    rng = np.random.default_rng(seed)
    net = RecurrentNet(obs_size, n_out, hidden, layers, rng)
    for k, v in net.params.items():
        net.params[k] = rng.normal(0.0, 0.5, v.shape)
    return net, rng


def fd_max_rel_error(net, x, h0, c0, dy, eps=1e-3):
    """Largest relative error between BPTT gradients of sum(dy * y) and central differences.

    Uses the five-point central stencil, whose O(eps^4) truncation error lets
    eps stay large enough that rounding does not swamp small gradients.
    """
    def loss():
        y, *_ = net.forward(x, h0, c0, keep_cache=False)
        return float(np.sum(dy * y))

    _, _, _, cache = net.forward(x, h0, c0)
    grads = net.backward(cache, dy)
    worst = 0.0
    for k, p in net.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            f = {}
            for step in (-2, -1, 1, 2):
                p[idx] = orig + step * eps
                f[step] = loss()
            p[idx] = orig
            num[idx] = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * eps)
        denom = np.maximum(np.maximum(np.abs(grads[k]), np.abs(num)), FD_FLOOR)
        worst = max(worst, float(np.max(np.abs(grads[k] - num) / denom)))
    return worst


def fd_check_instance(seed, T=4, B=2):
    net, rng = random_small_net(seed)
    x = rng.normal(size=(T, B, net.obs_size))
    h0 = rng.normal(0, 0.5, (net.layers, B, net.hidden))
    c0 = rng.normal(0, 0.5, (net.layers, B, net.hidden))
    dy = rng.normal(size=(T, B, net.n_out))
    return fd_max_rel_error(net, x, h0, c0, dy)


def brute_force_gae(rewards, values, dones, last_value, gamma, lam):
    """Advantages of one env row from the double-sum definition.

    A_t = sum_{l>=0} (gamma*lam)^l delta_{t+l}, truncated at the first done at or after t.
    """
    T = len(rewards)
    nxt = np.append(values[1:], last_value)
    delta = [rewards[t] + gamma * nxt[t] * (0.0 if dones[t] else 1.0) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total = 0.0
        for k in range(t, T):
            total += (gamma * lam) ** (k - t) * delta[k]
            if dones[k]:
                break
        adv[t] = total
    return adv
