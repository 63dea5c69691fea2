"""Episode returns: negated quadratic cost and the multiplicative saturation return."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidInputError

WEIGHT_SCHEMES = {
    "tr": (0.0, 1.0),
    "1_sr_1_tr": (1.0, 1.0),
    "1_sr_2_tr": (1.0, 2.0),
    "1_sr_3_tr": (1.0, 3.0),
}

DEFAULT_TRACKED = (1, 2)  # b1, b2


def weight_scheme(name: str, n_steps: int = 18) -> tuple[np.ndarray, float]:
    """Stage weights ``w_1..w_{N_s-1}`` and terminal weight ``w_{N_s}`` of a named scheme."""
    try:
        stage, terminal = WEIGHT_SCHEMES[name]
    except KeyError:
        raise ConfigurationError(f"unknown weight scheme {name!r}; "
                                 f"choose from {sorted(WEIGHT_SCHEMES)}") from None
    return np.full(n_steps - 1, stage), terminal


@dataclass(frozen=True)
class ReturnConfig:
    """Which return to compute and its weights.

    ``q``/``q_terminal`` are the diagonal quadratic weights and ``beta`` the
    error half-saturation constants, one entry per tracked state.
    ``stage_weights`` is a scalar or a length ``N_s - 1`` sequence.
    """

    kind: str = "saturation"
    tracked: tuple[int, ...] = DEFAULT_TRACKED
    q: tuple[float, ...] = (1.0, 1.0)
    q_terminal: tuple[float, ...] = (1.0, 1.0)
    alpha_max: float = 1.0
    beta: tuple[float, ...] = (27.0, 27.0)
    stage_weights: object = 1.0
    terminal_weight: float = 1.0
    scheme: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("quadratic", "saturation"):
            raise ConfigurationError(f"unknown return kind {self.kind!r}")
        n = len(self.tracked)
        if n < 1:
            raise ConfigurationError("at least one tracked state is required")
        if len(self.q) != n or len(self.q_terminal) != n or len(self.beta) != n:
            raise ConfigurationError("q, q_terminal and beta need one entry per tracked state")
        if min(self.q) < 0 or min(self.q_terminal) < 0:
            raise ConfigurationError("quadratic weights must be >= 0")
        if min(self.beta) <= 0 or not self.alpha_max > 0:
            raise ConfigurationError("beta and alpha_max must be > 0")
        if np.any(np.asarray(self.stage_weights, dtype=float) < 0) or self.terminal_weight < 0:
            raise ConfigurationError("reward weights must be >= 0")

    @classmethod
    def saturation(cls, beta: float, scheme: str = "1_sr_1_tr", n_steps: int = 18,
                   alpha_max: float = 1.0, tracked=DEFAULT_TRACKED) -> "ReturnConfig":
        stage, terminal = weight_scheme(scheme, n_steps)
        return cls(kind="saturation", tracked=tuple(tracked), beta=(float(beta),) * len(tracked),
                   q=(1.0,) * len(tracked), q_terminal=(1.0,) * len(tracked),
                   alpha_max=alpha_max, stage_weights=float(stage[0]) if len(stage) else 0.0,
                   terminal_weight=terminal, scheme=scheme)

    @classmethod
    def quadratic(cls, q=(1.0, 1.0), q_terminal=(1.0, 1.0), tracked=DEFAULT_TRACKED) -> "ReturnConfig":
        return cls(kind="quadratic", tracked=tuple(tracked), q=tuple(q), q_terminal=tuple(q_terminal),
                   beta=(1.0,) * len(tracked))

    @property
    def name(self) -> str:
        if self.kind == "quadratic":
            return "qc"
        beta = self.beta[0]
        return f"{self.scheme or 'custom'}_beta_{beta:g}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tracked": list(self.tracked), "q": list(self.q),
                "q_terminal": list(self.q_terminal), "alpha_max": self.alpha_max,
                "beta": list(self.beta),
                "stage_weights": np.asarray(self.stage_weights, dtype=float).tolist(),
                "terminal_weight": self.terminal_weight, "scheme": self.scheme}

    @classmethod
    def from_dict(cls, data: dict) -> "ReturnConfig":
        data = dict(data)
        for key in ("tracked", "q", "q_terminal", "beta"):
            if key in data:
                data[key] = tuple(data[key])
        sw = data.get("stage_weights")
        if isinstance(sw, list):
            data["stage_weights"] = tuple(sw)
        return cls(**data)


@dataclass(frozen=True)
class EpisodeReturn:
    total: float
    rewards: np.ndarray


def _tracked_sq_errors(states, refs, cfg):
    states = np.asarray(states, dtype=float)
    refs = np.asarray(refs, dtype=float)
    if states.ndim < 2 or states.shape[-2] < 2:
        raise InvalidInputError("states must have shape (..., N_s + 1, n_x) with N_s >= 1")
    n_steps = states.shape[-2] - 1
    if refs.shape[-2:] != (n_steps, len(cfg.tracked)):
        raise InvalidInputError(
            f"references must have shape (..., {n_steps}, {len(cfg.tracked)}), got {refs.shape}")
    x = states[..., 1:, :][..., list(cfg.tracked)]
    return (x - refs) ** 2


def _stage_weights(cfg, n_steps):
    w = np.asarray(cfg.stage_weights, dtype=float)
    if w.ndim == 0:
        return np.full(n_steps - 1, float(w))
    if w.shape != (n_steps - 1,):
        raise InvalidInputError(f"expected {n_steps - 1} stage weights, got {w.shape[0]}")
    return w


def step_rewards(states, refs, cfg: ReturnConfig) -> np.ndarray:
    """Per-step rewards ``R_1..R_{N_s}`` with shape ``(..., N_s)``.

    ``states`` is ``(..., N_s + 1, n_x)`` and ``refs`` holds the tracked
    references at steps ``1..N_s`` with shape ``(..., N_s, n_tracked)``.
    The last slot is the terminal reward.
    """
    eps = _tracked_sq_errors(states, refs, cfg)
    n_steps = eps.shape[-2]
    if cfg.kind == "quadratic":
        rewards = -(eps * np.asarray(cfg.q)).sum(axis=-1)
        rewards[..., -1] = -(eps[..., -1, :] * np.asarray(cfg.q_terminal)).sum(axis=-1)
        return rewards
    beta = np.asarray(cfg.beta, dtype=float)
    factors = np.prod(beta / (beta + eps), axis=-1)
    weights = np.append(_stage_weights(cfg, n_steps), cfg.terminal_weight)
    return weights * cfg.alpha_max * factors


def _episode_return(states, refs, cfg):
    rewards = step_rewards(states, refs, cfg)
    total = rewards.sum(axis=-1)
    return EpisodeReturn(total=float(total) if np.ndim(total) == 0 else total, rewards=rewards)


def quadratic_return(states, refs, cfg: ReturnConfig | None = None) -> EpisodeReturn:
    """Negated weighted squared tracking error summed over steps ``1..N_s``."""
    cfg = cfg or ReturnConfig.quadratic()
    if cfg.kind != "quadratic":
        raise InvalidInputError("quadratic_return needs a quadratic ReturnConfig")
    return _episode_return(states, refs, cfg)


def saturation_return(states, refs, cfg: ReturnConfig | None = None) -> EpisodeReturn:
    """Weighted product of ``beta / (beta + squared error)`` factors, summed over steps."""
    cfg = cfg or ReturnConfig.saturation(27.0)
    if cfg.kind != "saturation":
        raise InvalidInputError("saturation_return needs a saturation ReturnConfig")
    return _episode_return(states, refs, cfg)


def episode_return(states, refs, cfg: ReturnConfig) -> EpisodeReturn:
    return _episode_return(states, refs, cfg)


def max_return(cfg: ReturnConfig, n_steps: int) -> float:
    """Upper bound of the return (zero for the quadratic form)."""
    if cfg.kind == "quadratic":
        return 0.0
    return cfg.alpha_max * (float(_stage_weights(cfg, n_steps).sum()) + cfg.terminal_weight)


def normalize_returns(totals, eps_mach: float = 1e-8) -> np.ndarray:
    """Standardise a batch of episode returns into advantages (population std)."""
    totals = np.asarray(totals, dtype=float)
    if totals.ndim != 1 or totals.size < 2:
        raise InvalidInputError("need a 1-D batch of at least two returns")
    return (totals - totals.mean()) / (totals.std() + eps_mach)


def normalize_curve(mean_returns, kind: str) -> np.ndarray:
    """Scale a per-epoch mean-return curve into [0, 1] for display and NAUC.

    Saturation curves are positive and are divided by their maximum.
    Quadratic curves are non-positive, so they are min-max scaled instead.
    A flat curve maps to all ones.
    """
    j = np.asarray(mean_returns, dtype=float)
    if j.size == 0:
        return j.copy()
    if kind == "saturation":
        top = j.max()
        if top <= 0:
            raise InvalidInputError("saturation returns must be positive")
        return j / top
    lo, hi = j.min(), j.max()
    if hi == lo:
        return np.ones_like(j)
    return (j - lo) / (hi - lo)


def write_return_curve_csv(path, mean_returns, std_returns, kind: str) -> None:
    normalized = normalize_curve(mean_returns, kind)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "mean_return", "std_return", "normalized_mean_return"))
        for m, (mean, std, norm) in enumerate(zip(mean_returns, std_returns, normalized)):
            writer.writerow((m, repr(float(mean)), repr(float(std)), repr(float(norm))))


def read_return_curve_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = [np.array([float(r[k]) for r in rows])
            for k in ("mean_return", "std_return", "normalized_mean_return")]
    return cols[0], cols[1], cols[2]
