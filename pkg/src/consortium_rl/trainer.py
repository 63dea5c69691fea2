"""Monte Carlo policy-gradient training.

Each epoch rolls out ``n_mc`` episodes with the current policy, standardises
their returns into advantages and takes one plain gradient-ascent step

    theta <- theta + alpha * (1/n_mc) * sum_k A_k * grad sum_t log pi(u_t^k | s_t^k).

Episodes of an epoch are simulated together as one batch. Randomness is
drawn from per-episode generators keyed by ``(seed, epoch, episode, stream)``
(stream 0: action noise, stream 1: disturbances), so every draw can be
re-derived without replaying the whole run.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import (N_INPUTS, N_STATES, IntegrationStats, KineticParameters,
                       OperatingConditions)
from .errors import ConfigurationError, IntegrationError, TrainingDivergedError
from .policy import (PolicyParameters, apply_noise, build_observation, forward,
                     grad_log_prob_sum, init_policy)
from .returns import EpisodeReturn, ReturnConfig, normalize_returns, step_rewards

log = logging.getLogger(__name__)

ACTION_STREAM = 0
DISTURBANCE_STREAM = 1

PARAMETER_TARGETS = ("q_a_max_1", "q_a_max_2")


@dataclass(frozen=True)
class UncertaintySpec:
    """Truncated Gaussian perturbation of the initial state and selected parameters.

    Every target is drawn from ``N(nominal, (rel_std * nominal)^2)`` and
    redrawn while it lies more than ``n_sigma`` standard deviations away.
    """

    rel_std: float = 0.07
    n_sigma: float = 3.0
    perturb_initial_state: bool = True
    parameters: tuple[str, ...] = PARAMETER_TARGETS

    def __post_init__(self):
        if not 0 <= self.rel_std < 1.0 / 3.0:
            raise ConfigurationError("rel_std must lie in [0, 1/3)")
        if not self.n_sigma > 0:
            raise ConfigurationError("n_sigma must be > 0")
        names = {f.name for f in dataclasses.fields(KineticParameters)}
        bad = set(self.parameters) - names
        if bad:
            raise ConfigurationError(f"unknown uncertain parameters {sorted(bad)}")

    def to_dict(self) -> dict:
        return {"rel_std": self.rel_std, "n_sigma": self.n_sigma,
                "perturb_initial_state": self.perturb_initial_state,
                "parameters": list(self.parameters)}

    @classmethod
    def from_dict(cls, data: dict) -> "UncertaintySpec":
        data = dict(data)
        if "parameters" in data:
            data["parameters"] = tuple(data["parameters"])
        return cls(**data)


@dataclass(frozen=True)
class TrainingConfig:
    n_mc: int = 100
    alpha: float = 1e-3
    max_epochs: int = 150
    patience: int = 100
    seed: int = 0
    uncertainty: UncertaintySpec | None = None
    eps_mach: float = 1e-8
    init_std_fraction: float = 0.2
    sigma_floor: float = 1e-3
    optimizer: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.n_mc < 2:
            raise ConfigurationError("n_mc must be >= 2")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigurationError("patience and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["uncertainty"] = None if self.uncertainty is None else self.uncertainty.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        data = dict(data)
        if "adam_betas" in data:
            data["adam_betas"] = tuple(data["adam_betas"])
        unc = data.get("uncertainty")
        if isinstance(unc, dict):
            data["uncertainty"] = UncertaintySpec.from_dict(unc)
        return cls(**data)


@dataclass(frozen=True)
class EnvConfig:
    """Everything needed to simulate one episode apart from the policy."""

    x0: tuple[float, ...] = dataclasses.astuple(dynamics.SETPOINT_X0)
    params: KineticParameters = dynamics.NOMINAL_PARAMETERS
    op: OperatingConditions = dynamics.NOMINAL_OPERATING
    n_steps: int = 18
    dt: float = 1.0
    n_substeps: int = 20
    input_upper: tuple[float, float] | None = None
    obs_scale: tuple[float, ...] | None = None

    @property
    def upper(self) -> np.ndarray:
        if self.input_upper is None:
            return dynamics.default_input_upper(self.params)
        return np.asarray(self.input_upper, dtype=float)

    def to_dict(self) -> dict:
        return {"x0": list(self.x0), "model": self.params.to_dict(), "operating": self.op.to_dict(),
                "n_steps": self.n_steps, "dt": self.dt, "n_substeps": self.n_substeps,
                "input_upper": self.upper.tolist(),
                "obs_scale": None if self.obs_scale is None else list(self.obs_scale)}


@dataclass
class EpisodeTrajectory:
    observations: np.ndarray   # (N_s, obs_dim)
    raw_actions: np.ndarray    # (N_s, 2), sampled
    actions: np.ndarray        # (N_s, 2), clipped and applied
    rewards: np.ndarray        # (N_s,), R_1..R_{N_s}
    states: np.ndarray         # (N_s + 1, 5)


@dataclass
class RolloutBatch:
    observations: np.ndarray   # (B, N_s, obs_dim)
    raw_actions: np.ndarray    # (B, N_s, 2)
    actions: np.ndarray        # (B, N_s, 2)
    states: np.ndarray         # (B, N_s + 1, 5)
    rewards: np.ndarray        # (B, N_s)
    totals: np.ndarray         # (B,)
    clamped: int = 0

    def __len__(self):
        return self.totals.shape[0]

    def episode(self, k: int) -> EpisodeTrajectory:
        return EpisodeTrajectory(self.observations[k], self.raw_actions[k], self.actions[k],
                                 self.rewards[k], self.states[k])


@dataclass
class Disturbance:
    x0: np.ndarray
    params: KineticParameters


@dataclass
class EpochRecord:
    epoch: int
    mean_return: float
    std_return: float
    best: bool
    wall_time: float


@dataclass
class TrainingResult:
    final: PolicyParameters
    best: PolicyParameters
    best_epoch: int
    records: list[EpochRecord]
    best_batch: RolloutBatch
    disturbances: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def mean_returns(self) -> np.ndarray:
        return np.array([r.mean_return for r in self.records])

    @property
    def std_returns(self) -> np.ndarray:
        return np.array([r.std_return for r in self.records])

    @property
    def best_mean_return(self) -> float:
        return self.records[self.best_epoch].mean_return


def episode_rng(seed: int, epoch: int, episode: int, stream: int = ACTION_STREAM) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), int(episode), int(stream)])


def sample_disturbance(spec: UncertaintySpec, x0, params: KineticParameters,
                       rng: np.random.Generator) -> Disturbance:
    """Perturbed initial state and parameters for one episode."""
    x0 = np.array(x0, dtype=float)

    def draw(nominal):
        if spec.rel_std == 0:
            return nominal
        z = rng.standard_normal()
        while abs(z) > spec.n_sigma:
            z = rng.standard_normal()
        return nominal + spec.rel_std * nominal * z

    if spec.perturb_initial_state:
        x0 = np.array([draw(v) for v in x0])
    changes = {name: draw(float(getattr(params, name))) for name in spec.parameters}
    return Disturbance(x0, params.replace(**changes))


def epoch_disturbances(spec: UncertaintySpec, env: EnvConfig, seed: int, epoch: int,
                       n_episodes: int) -> list[Disturbance]:
    return [sample_disturbance(spec, env.x0, env.params,
                               episode_rng(seed, epoch, k, DISTURBANCE_STREAM))
            for k in range(n_episodes)]


def rollout_batch(policy: PolicyParameters, env: EnvConfig, ret_cfg: ReturnConfig, refs,
                  rngs, disturbances: list[Disturbance] | None = None) -> RolloutBatch:
    """Simulate one episode per generator in ``rngs``, all as a single batch.

    ``refs`` holds the tracked references at steps ``1..N_s``: shape
    ``(N_s, n_tracked)``.
    """
    n_ep = len(rngs)
    T = env.n_steps
    upper = env.upper
    noise = np.stack([r.standard_normal((T, N_INPUTS)) for r in rngs])
    if disturbances is None:
        x = np.broadcast_to(np.asarray(env.x0, dtype=float), (n_ep, N_STATES)).copy()
        params = env.params
    else:
        x = np.stack([d.x0 for d in disturbances])
        params = dynamics.stack_parameters([d.params for d in disturbances])

    states = np.zeros((n_ep, T + 1, N_STATES))
    raw = np.zeros((n_ep, T, N_INPUTS))
    applied = np.zeros((n_ep, T, N_INPUTS))
    obs = np.zeros((n_ep, T, policy.obs_dim))
    states[:, 0] = x
    stats = IntegrationStats()
    for t in range(T):
        obs[:, t] = build_observation(states, applied, t, T)
        dist = forward(policy, obs[:, t])
        raw[:, t], applied[:, t] = apply_noise(dist, noise[:, t], upper)
        try:
            x = dynamics.integrate_interval(x, applied[:, t], params, env.op, env.dt,
                                            env.n_substeps, stats, check_inputs=False)
        except IntegrationError as exc:
            raise IntegrationError(f"rollout step {t}: {exc}", step=exc.step,
                                   context={"control_step": t}) from exc
        states[:, t + 1] = x
    rewards = step_rewards(states, refs, ret_cfg)
    return RolloutBatch(obs, raw, applied, states, rewards, rewards.sum(axis=-1), stats.clamped)


def rollout_episode(policy: PolicyParameters, env: EnvConfig, ret_cfg: ReturnConfig, refs,
                    rng: np.random.Generator, disturbance: Disturbance | None = None):
    """One episode; returns ``(EpisodeTrajectory, EpisodeReturn)``."""
    batch = rollout_batch(policy, env, ret_cfg, refs, [rng],
                          None if disturbance is None else [disturbance])
    traj = batch.episode(0)
    return traj, EpisodeReturn(float(batch.totals[0]), traj.rewards)


def policy_gradient(policy: PolicyParameters, batch: RolloutBatch, eps_mach: float = 1e-8):
    """Normalised-advantage REINFORCE estimate; returns ``(gradient, advantages)``."""
    adv = normalize_returns(batch.totals, eps_mach)
    grad, _ = grad_log_prob_sum(policy, batch.observations, batch.raw_actions, adv / len(batch))
    return grad, adv


def _disturbance_rows(epoch, seed, dists):
    rows = []
    for k, d in enumerate(dists):
        row = {"epoch": epoch, "episode": k, "entropy": [seed, epoch, k, DISTURBANCE_STREAM]}
        row.update({f"{n}_0": float(v) for n, v in zip(dynamics.STATE_NAMES, d.x0)})
        for name in PARAMETER_TARGETS:
            row[name] = float(getattr(d.params, name))
        rows.append(row)
    return rows


def train(cfg: TrainingConfig, env: EnvConfig, ret_cfg: ReturnConfig, refs,
          policy: PolicyParameters | None = None, callback=None) -> TrainingResult:
    """Run gradient ascent until ``max_epochs`` or ``patience`` epochs without a strictly better mean return."""
    refs = np.asarray(refs, dtype=float)
    if policy is None:
        policy = init_policy(cfg.seed, env.upper, cfg.init_std_fraction, cfg.sigma_floor,
                             obs_scale=env.obs_scale)
    policy = policy.copy()
    records: list[EpochRecord] = []
    disturbance_log: list[dict] = []
    best_mean = -np.inf
    best_epoch = -1
    best_policy = policy
    best_batch = None
    since_best = 0
    stopped_early = False
    step = AscentStep(cfg)

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        dists = None
        if cfg.uncertainty is not None:
            dists = epoch_disturbances(cfg.uncertainty, env, cfg.seed, epoch, cfg.n_mc)
            disturbance_log.extend(_disturbance_rows(epoch, cfg.seed, dists))
        rngs = [episode_rng(cfg.seed, epoch, k) for k in range(cfg.n_mc)]
        try:
            batch = rollout_batch(policy, env, ret_cfg, refs, rngs, dists)
        except IntegrationError as exc:
            exc.context.update({"epoch": epoch, "seed": cfg.seed})
            raise
        mean, std = float(batch.totals.mean()), float(batch.totals.std())
        if not (np.isfinite(mean) and np.isfinite(std)):
            raise TrainingDivergedError("non-finite return", _dump(epoch, batch, policy))

        improved = mean > best_mean
        if improved:
            best_mean, best_epoch, best_policy, best_batch = mean, epoch, policy, batch
            since_best = 0
        else:
            since_best += 1
        record = EpochRecord(epoch, mean, std, improved, 0.0)
        records.append(record)

        grad, _ = policy_gradient(policy, batch, cfg.eps_mach)
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError("non-finite gradient", _dump(epoch, batch, policy))
        policy = policy.with_theta(policy.theta + step.direction(grad))
        record.wall_time = time.perf_counter() - t0
        if callback is not None:
            callback(record)
        log.debug("epoch %d mean %.6g std %.6g", epoch, mean, std)
        if since_best >= cfg.patience:
            stopped_early = True
            break

    return TrainingResult(policy, best_policy, best_epoch, records, best_batch,
                          disturbance_log, stopped_early)


class AscentStep:
    """Parameter increment for a gradient-ascent step.

    ``sgd`` returns ``alpha * grad``. ``adam`` rescales the gradient by bias-corrected
    running moment estimates before multiplying by ``alpha``.
    """

    def __init__(self, cfg: TrainingConfig):
        self.cfg = cfg
        self.m = None
        self.v = None
        self.t = 0

    def direction(self, grad: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            return cfg.alpha * grad
        b1, b2 = cfg.adam_betas
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return cfg.alpha * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _dump(epoch, batch, policy):
    return {"epoch": epoch,
            "n_nonfinite_returns": int(np.sum(~np.isfinite(batch.totals))),
            "max_abs_state": float(np.nanmax(np.abs(batch.states))),
            "clamped": batch.clamped,
            "param_hash": policy.content_hash(),
            "max_abs_param": float(np.max(np.abs(policy.theta)))}


def write_epoch_csv(path, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "mean_return", "std_return", "best_flag"))
        for r in records:
            writer.writerow((r.epoch, repr(r.mean_return), repr(r.std_return), int(r.best)))


def write_disturbance_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = [k for k in rows[0] if k != "entropy"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys + ["seed_entropy"])
        for row in rows:
            writer.writerow([row[k] if isinstance(row[k], int) else repr(row[k]) for k in keys]
                            + [" ".join(str(v) for v in row["entropy"])])
