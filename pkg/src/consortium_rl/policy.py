"""Gaussian policy network with hand-written reverse-mode gradients.

The network is a shared trunk of leaky-ReLU layers (slope 0.1) feeding two
linear heads: one for the action mean and one for a pre-activation that is
mapped to a standard deviation via ``softplus(.) + sigma_floor``.
All trainable values live in one flat vector so the gradient-ascent step
is a single vector update.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import N_INPUTS, N_STATES
from .errors import GradientError, InvalidInputError

OBS_DIM = 2 * N_STATES + 2 * N_INPUTS + 1
HIDDEN = (20, 20, 20, 20)
LEAK = 0.1
SIGMA_FLOOR = 1e-3
CHECKPOINT_FORMAT = "consortium-rl-policy"
CHECKPOINT_VERSION = 1
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def layer_shapes(obs_dim=OBS_DIM, hidden=HIDDEN, n_actions=N_INPUTS):
    """(fan_in, fan_out) for every trunk layer, then the mean head and the std head."""
    sizes = (obs_dim,) + tuple(hidden)
    shapes = [(sizes[k], sizes[k + 1]) for k in range(len(hidden))]
    shapes.append((sizes[-1], n_actions))
    shapes.append((sizes[-1], n_actions))
    return shapes


def parameter_count(obs_dim=OBS_DIM, hidden=HIDDEN, n_actions=N_INPUTS) -> int:
    return sum(i * o + o for i, o in layer_shapes(obs_dim, hidden, n_actions))


@dataclass
class PolicyParameters:
    """Flat parameter vector plus the fixed architecture that interprets it.

    ``obs_scale`` divides each observation component before the first layer.
    It is part of the architecture and is never trained.
    """

    theta: np.ndarray
    obs_dim: int = OBS_DIM
    hidden: tuple[int, ...] = HIDDEN
    n_actions: int = N_INPUTS
    sigma_floor: float = SIGMA_FLOOR
    obs_scale: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.hidden = tuple(int(h) for h in self.hidden)
        n = parameter_count(self.obs_dim, self.hidden, self.n_actions)
        if self.theta.shape != (n,):
            raise InvalidInputError(f"expected {n} parameters, got shape {self.theta.shape}")
        if self.obs_scale is not None:
            self.obs_scale = np.asarray(self.obs_scale, dtype=float)
            if self.obs_scale.shape != (self.obs_dim,) or np.any(self.obs_scale <= 0):
                raise InvalidInputError("obs_scale must hold one positive value per observation")

    @property
    def size(self) -> int:
        return self.theta.size

    def layers(self, vector=None):
        """(W, b) views into ``vector`` (default ``theta``); W has shape (fan_in, fan_out)."""
        vector = self.theta if vector is None else vector
        out, pos = [], 0
        for i, o in layer_shapes(self.obs_dim, self.hidden, self.n_actions):
            W = vector[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = vector[pos:pos + o]
            pos += o
            out.append((W, b))
        return out

    def with_theta(self, theta) -> "PolicyParameters":
        return PolicyParameters(np.array(theta, dtype=float), self.obs_dim, self.hidden,
                                self.n_actions, self.sigma_floor, self.obs_scale, self.seed)

    def copy(self) -> "PolicyParameters":
        return self.with_theta(self.theta.copy())

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.theta).tobytes()).hexdigest()


@dataclass(frozen=True)
class ActionDistribution:
    mean: np.ndarray
    std: np.ndarray


def init_policy(seed: int, action_upper, init_std_fraction: float = 0.2,
                sigma_floor: float = SIGMA_FLOOR, hidden=HIDDEN, obs_scale=None) -> PolicyParameters:
    """Fan-in scaled uniform weights, zero biases, std-head bias giving an initial
    standard deviation of ``init_std_fraction * action_upper`` per input."""
    rng = np.random.default_rng(seed)
    action_upper = np.asarray(action_upper, dtype=float)
    n_actions = action_upper.size
    shapes = layer_shapes(OBS_DIM, hidden, n_actions)
    theta = np.zeros(parameter_count(OBS_DIM, hidden, n_actions))
    params = PolicyParameters(theta, OBS_DIM, hidden, n_actions, sigma_floor, obs_scale, seed)
    for (W, b), (fan_in, _) in zip(params.layers(), shapes):
        bound = 1.0 / math.sqrt(fan_in)
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    target = np.maximum(init_std_fraction * action_upper - sigma_floor, 1e-6)
    params.layers()[-1][1][...] = target + np.log(-np.expm1(-target))  # softplus inverse
    return params


def _leaky(z):
    return np.where(z > 0, z, LEAK * z)


def _softplus(p):
    return np.logaddexp(0.0, p)


def _sigmoid(p):
    return np.exp(-np.logaddexp(0.0, -p))


def _forward(params, obs):
    x = obs if params.obs_scale is None else obs / params.obs_scale
    *trunk, (Wm, bm), (Ws, bs) = params.layers()
    pre, post = [], [x]
    h = x
    for W, b in trunk:
        z = h @ W + b
        h = _leaky(z)
        pre.append(z)
        post.append(h)
    mean = h @ Wm + bm
    pre_std = h @ Ws + bs
    std = _softplus(pre_std) + params.sigma_floor
    return mean, std, pre_std, pre, post


def forward(params: PolicyParameters, obs) -> ActionDistribution:
    """Action mean and standard deviation for one observation or a batch."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1:] != (params.obs_dim,):
        raise InvalidInputError(f"observation must have last axis {params.obs_dim}")
    if not np.all(np.isfinite(obs)):
        raise InvalidInputError("observation contains non-finite values")
    mean, std, *_ = _forward(params, obs)
    return ActionDistribution(mean, std)


def apply_noise(dist: ActionDistribution, noise, upper):
    """Raw Gaussian action ``mean + std * noise`` and its copy clipped to ``[0, upper]``."""
    raw = dist.mean + dist.std * noise
    return raw, np.clip(raw, 0.0, upper)


def sample_action(dist: ActionDistribution, rng: np.random.Generator, upper):
    """Draw ``raw ~ N(mean, std)``; return ``(raw, applied)`` where applied is clipped."""
    return apply_noise(dist, rng.standard_normal(np.shape(dist.mean)), upper)


def log_prob(dist: ActionDistribution, raw) -> np.ndarray:
    """Gaussian log-density of the raw (unclipped) action, summed over action components."""
    z = (np.asarray(raw, dtype=float) - dist.mean) / dist.std
    return (-0.5 * z * z - np.log(dist.std) - _LOG_SQRT_2PI).sum(axis=-1)


def grad_log_prob_sum(params: PolicyParameters, obs, raw, weights=None):
    """Gradient of ``sum_r weights_r * log pi(raw_r | obs_r)`` w.r.t. the flat parameters.

    ``obs`` is ``(..., obs_dim)`` and ``raw`` is ``(..., n_actions)``; every
    leading index is one (observation, action) pair. ``weights`` defaults to
    ones and broadcasts from the left, so a ``(n_episodes,)`` vector weights
    every step of each episode of a ``(n_episodes, N_s, obs_dim)`` batch.

    Returns ``(gradient, weighted log-prob sum)``.
    """
    obs = np.asarray(obs, dtype=float)
    raw = np.asarray(raw, dtype=float)
    lead = obs.shape[:-1]
    if raw.shape != lead + (params.n_actions,):
        raise InvalidInputError(f"raw actions must have shape {lead + (params.n_actions,)}")
    if obs.size == 0:
        raise InvalidInputError("episode must contain at least one step")
    if weights is None:
        w = np.ones(lead)
    else:
        w = np.asarray(weights, dtype=float)
        w = np.broadcast_to(w.reshape(w.shape + (1,) * (len(lead) - w.ndim)), lead)
    obs2 = obs.reshape(-1, params.obs_dim)
    raw2 = raw.reshape(-1, params.n_actions)
    w2 = w.reshape(-1, 1)

    mean, std, pre_std, pre, post = _forward(params, obs2)
    diff = raw2 - mean
    inv_var = 1.0 / (std * std)
    logp = (-0.5 * diff * diff * inv_var - np.log(std) - _LOG_SQRT_2PI).sum(axis=-1)

    d_mean = w2 * diff * inv_var
    d_std = w2 * (diff * diff * inv_var / std - 1.0 / std)
    d_pre_std = d_std * _sigmoid(pre_std)

    grad = np.zeros_like(params.theta)
    glayers = params.layers(grad)
    *trunk, (Wm, _), (Ws, _) = params.layers()
    h = post[-1]
    glayers[-2][0][...] = h.T @ d_mean
    glayers[-2][1][...] = d_mean.sum(axis=0)
    glayers[-1][0][...] = h.T @ d_pre_std
    glayers[-1][1][...] = d_pre_std.sum(axis=0)
    dh = d_mean @ Wm.T + d_pre_std @ Ws.T
    for k in range(len(trunk) - 1, -1, -1):
        dz = dh * np.where(pre[k] > 0, 1.0, LEAK)
        glayers[k][0][...] = post[k].T @ dz
        glayers[k][1][...] = dz.sum(axis=0)
        if k:
            dh = dz @ trunk[k][0].T
    if not np.all(np.isfinite(grad)):
        raise GradientError("non-finite policy gradient")
    return grad, float((w2[:, 0] * logp).sum())


def build_observation(states, inputs, t: int, n_steps: int) -> np.ndarray:
    """Observation ``[x_{t-1}, u_{t-2}, x_t, u_{t-1}, t_n]`` with zeros before the episode start.

    ``states`` is ``(..., T, 5)`` with at least ``t + 1`` entries and
    ``inputs`` is ``(..., T', 2)`` with at least ``t`` entries. ``t_n`` maps
    ``t`` linearly onto ``[-1, 1]`` as ``2 t / N_s - 1``.
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if not 0 <= t <= n_steps - 1:
        raise InvalidInputError(f"t must lie in [0, {n_steps - 1}]")
    lead = states.shape[:-2]
    obs = np.zeros(lead + (OBS_DIM,))
    n_x, n_u = N_STATES, N_INPUTS
    if t >= 1:
        obs[..., 0:n_x] = states[..., t - 1, :]
    if t >= 2:
        obs[..., n_x:n_x + n_u] = inputs[..., t - 2, :]
    obs[..., n_x + n_u:2 * n_x + n_u] = states[..., t, :]
    if t >= 1:
        obs[..., 2 * n_x + n_u:2 * n_x + 2 * n_u] = inputs[..., t - 1, :]
    obs[..., -1] = 2.0 * t / n_steps - 1.0
    return obs


def save_checkpoint(path, params: PolicyParameters, **extra) -> None:
    """Write the policy to a JSON file; floats are stored as exact hex strings."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "obs_dim": params.obs_dim,
        "hidden": list(params.hidden),
        "n_actions": params.n_actions,
        "sigma_floor": params.sigma_floor.hex(),
        "seed": params.seed,
        "obs_scale": None if params.obs_scale is None else [float(v).hex() for v in params.obs_scale],
        "theta": [float(v).hex() for v in params.theta],
        "sha256": params.content_hash(),
        "extra": extra,
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_checkpoint(path) -> PolicyParameters:
    data = json.loads(Path(path).read_text())
    if data.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path} is not a policy checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {data.get('version')}")
    theta = np.array([float.fromhex(v) for v in data["theta"]])
    expected = parameter_count(data["obs_dim"], tuple(data["hidden"]), data["n_actions"])
    if theta.size != expected:
        raise InvalidInputError("checkpoint parameter count does not match its layer sizes")
    scale = data.get("obs_scale")
    return PolicyParameters(
        theta, data["obs_dim"], tuple(data["hidden"]), data["n_actions"],
        float.fromhex(data["sigma_floor"]),
        None if scale is None else np.array([float.fromhex(v) for v in scale]),
        data.get("seed"))
