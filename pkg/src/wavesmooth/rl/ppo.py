"""PPO building blocks: reward, GAE, clipped losses, analytic gradients, Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from wavesmooth.control import PolicyParameters, gaussian_entropy, log_prob, mlp_forward
from wavesmooth.core import RewardCoeffs


class TrainingFault(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# reward


def reward(energies, a_out, h, v_av, h_min, h_max, coeffs: RewardCoeffs):
    """Per-step reward. Works elementwise; ``energies`` has the platoon on its last axis.

    r = -c1 mean(E) - c2 a_out^2 - c3 [h outside [h_min, h_max]] - c4 (h / v_av) [h > 10 and v_av > 1]
    """
    e = np.asarray(energies, dtype=float)
    h = np.asarray(h, dtype=float)
    v_av = np.asarray(v_av, dtype=float)
    outside = (h < h_min) | (h > h_max)
    gate = (h > 10.0) & (v_av > 1.0)
    time_gap = np.where(gate, h / np.where(gate, v_av, 1.0), 0.0)
    r = (-coeffs.c1 * e.mean(axis=-1) - coeffs.c2 * np.square(a_out)
         - coeffs.c3 * outside - coeffs.c4 * time_gap)
    return r[()] if np.ndim(r) == 0 else r


# --------------------------------------------------------------------------- #
# advantages


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value=0.0):
    """Generalised advantage estimates along axis 0.

    ``dones[t]`` marks a true termination after step ``t``; ``last_value``
    bootstraps the step after the final one (0 at a true end, the value
    estimate at a horizon cut). Extra axes are independent sequences.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if not (r.shape == v.shape == d.shape):
        raise ValueError(f"length mismatch: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    adv = np.zeros_like(r)
    nxt_v = np.broadcast_to(np.asarray(last_value, dtype=float), r.shape[1:]).copy()
    nxt_a = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * nxt_v * live - v[t]
        nxt_a = delta + gamma * lam * live * nxt_a
        adv[t] = nxt_a
        nxt_v = v[t]
    return adv, adv + v


def normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


# --------------------------------------------------------------------------- #
# losses and gradients


@dataclass
class Minibatch:
    obs: np.ndarray       # (B, 14)
    aug: np.ndarray       # (B, 20)
    u: np.ndarray         # pre-squash actions
    logp_old: np.ndarray
    adv: np.ndarray       # normalised advantages
    ret: np.ndarray
    v_old: np.ndarray

    def __len__(self):
        return len(self.u)

    def take(self, idx) -> Minibatch:
        return Minibatch(*(getattr(self, f)[idx] for f in ("obs", "aug", "u", "logp_old", "adv", "ret", "v_old")))


@dataclass
class LossStats:
    policy_loss: float
    value_loss: float
    entropy: float
    total: float
    clip_frac: float


def clipped_objective(ratio, adv, clip_eps):
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def _losses(params: PolicyParameters, mb: Minibatch, clip_eps, value_coeff, entropy_coeff, clip_value,
            actor_cache=None, value_cache=None):
    mean = mlp_forward(params.actor, mb.obs, actor_cache)[:, 0]
    vpred = mlp_forward(params.value, mb.aug, value_cache)[:, 0]
    logp = log_prob(mb.u, mean, params.log_std)
    ratio = np.exp(logp - mb.logp_old)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if len(bad):
        raise TrainingFault(f"non-finite probability ratio at transition {int(bad[0])}")
    obj = clipped_objective(ratio, mb.adv, clip_eps)
    policy_loss = -float(obj.mean())
    err = vpred - mb.ret
    if clip_value is not None:
        vclip = mb.v_old + np.clip(vpred - mb.v_old, -clip_value, clip_value)
        err_c = vclip - mb.ret
        use_c = err_c ** 2 > err ** 2
        value_loss = float(np.where(use_c, err_c ** 2, err ** 2).mean())
    else:
        use_c = None
        value_loss = float((err ** 2).mean())
    entropy = gaussian_entropy(params.log_std)
    total = policy_loss + value_coeff * value_loss - entropy_coeff * entropy
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip_eps))
    parts = dict(mean=mean, vpred=vpred, ratio=ratio, err=err, use_c=use_c)
    return LossStats(policy_loss, value_loss, entropy, total, clip_frac), parts


def ppo_losses(mb: Minibatch, params: PolicyParameters, clip_eps: float, value_coeff: float = 0.5,
               entropy_coeff: float = 0.0, clip_value: float | None = None) -> LossStats:
    return _losses(params, mb, clip_eps, value_coeff, entropy_coeff, clip_value)[0]


def mlp_backward(layers, cache, dout):
    """Gradients of a tanh MLP given the layer inputs recorded by the forward pass."""
    grads = [None] * len(layers)
    dz = dout
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        x = cache[k]
        grads[k] = (x.T @ dz, dz.sum(axis=0))
        if k:
            dz = (dz @ w.T) * (1.0 - x * x)
    return grads


def loss_and_grad(params: PolicyParameters, mb: Minibatch, clip_eps: float, value_coeff: float = 0.5,
                  entropy_coeff: float = 0.0, clip_value: float | None = None):
    """Total PPO loss and its gradient as a :class:`PolicyParameters` of the same shape."""
    ac, vc = [], []
    stats, p = _losses(params, mb, clip_eps, value_coeff, entropy_coeff, clip_value, ac, vc)
    n = len(mb)
    std = math.exp(params.log_std)
    # d(policy_loss)/d(logp): only samples on the unclipped side of the min carry gradient
    ratio, adv = p["ratio"], mb.adv
    unclipped = ratio * adv <= np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    dlogp = -(ratio * adv * unclipped) / n
    z = (mb.u - p["mean"]) / std
    dmean = dlogp * z / std
    dlog_std = float(np.sum(dlogp * (z * z - 1.0))) - entropy_coeff
    if clip_value is None:
        dv = value_coeff * 2.0 * p["err"] / n
    else:
        inside = np.abs(p["vpred"] - mb.v_old) < clip_value
        err_c = mb.v_old + np.clip(p["vpred"] - mb.v_old, -clip_value, clip_value) - mb.ret
        dv = value_coeff * 2.0 / n * np.where(p["use_c"], err_c * inside, p["err"])
    g_actor = mlp_backward(params.actor, ac, dmean[:, None])
    g_value = mlp_backward(params.value, vc, dv[:, None])
    return stats, PolicyParameters(g_actor, dlog_std, g_value)


def flatten(p: PolicyParameters) -> np.ndarray:
    return p.flat()


def unflatten(template: PolicyParameters, vec: np.ndarray) -> PolicyParameters:
    off = 0

    def take(shape):
        nonlocal off
        size = int(np.prod(shape))
        out = vec[off:off + size].reshape(shape).copy()
        off += size
        return out

    actor = [(take(w.shape), take(b.shape)) for w, b in template.actor]
    log_std = float(take((1,))[0])
    value = [(take(w.shape), take(b.shape)) for w, b in template.value]
    return PolicyParameters(actor, log_std, value)


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def backprop_and_step(params: PolicyParameters, mb: Minibatch, opt: Adam, clip_eps: float,
                      value_coeff: float = 0.5, entropy_coeff: float = 0.0, clip_value: float | None = None,
                      max_grad_norm: float | None = None):
    """One optimiser step. Returns ``(new_params, stats, grad_norm)``; grad_norm is before clipping."""
    stats, grads = loss_and_grad(params, mb, clip_eps, value_coeff, entropy_coeff, clip_value)
    g = grads.flat()
    if not np.all(np.isfinite(g)):
        raise TrainingFault("non-finite gradient; parameters left unchanged")
    norm = float(np.linalg.norm(g))
    if max_grad_norm and norm > max_grad_norm:
        g = g * (max_grad_norm / norm)
    theta = opt.step(params.flat(), g)
    return unflatten(params, theta), stats, norm
