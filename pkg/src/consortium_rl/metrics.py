"""Tracking and learning-curve metrics, and rank-sum scenario selection."""
from __future__ import annotations

import csv
import statistics
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class ScenarioScore:
    scenario: str
    naae: float
    nauc: float
    rank_naae: int
    rank_nauc: int
    rank_sum: int


def naae_per_state(mean_traj, refs) -> np.ndarray:
    """Normalised average absolute error of each tracked state.

    ``mean_traj`` and ``refs`` have shape ``(N_s, n_tracked)`` and hold
    the (episode-averaged) tracked states and references at steps 1..N_s.
    """
    x = np.asarray(mean_traj, dtype=float)
    r = np.asarray(refs, dtype=float)
    if x.shape != r.shape or x.ndim != 2:
        raise InvalidInputError(f"trajectory {x.shape} and references {r.shape} must match (N_s, n)")
    if np.any(r == 0):
        raise InvalidInputError("references must be nonzero")
    return np.mean(np.abs((r - x) / r), axis=0)


def naae_total(per_state) -> float:
    per_state = np.asarray(per_state, dtype=float)
    if per_state.size == 0:
        raise InvalidInputError("need at least one tracked state")
    return float(per_state.mean())


def naae_episode_stats(states, refs, tracked=(1, 2)) -> tuple[float, float]:
    """Mean and population std over episodes of each episode's total NAAE.

    ``states`` is ``(n_episodes, N_s + 1, n_x)``; ``refs`` is ``(N_s, n_tracked)``.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[0] < 1:
        raise InvalidInputError("states must have shape (n_episodes, N_s + 1, n_x)")
    totals = [naae_total(naae_per_state(ep[1:, list(tracked)], refs)) for ep in states]
    # correctly rounded, so identical episodes give exactly zero spread
    return statistics.fmean(totals), statistics.pstdev(totals)


def naae_of_mean(states, refs, tracked=(1, 2)) -> np.ndarray:
    """Per-state NAAE of the episode-averaged trajectory."""
    states = np.asarray(states, dtype=float)
    return naae_per_state(states.mean(axis=0)[1:, list(tracked)], refs)


def nauc(normalized_curve) -> float:
    """Trapezoidal area under a [0, 1]-scaled mean-return curve, divided by the number of intervals."""
    j = np.asarray(normalized_curve, dtype=float)
    if j.ndim != 1 or j.size < 2:
        raise InvalidInputError("need a curve of at least two epochs")
    if np.any(~np.isfinite(j)) or j.min() < 0 or j.max() > 1:
        raise InvalidInputError("normalized returns must lie in [0, 1]")
    return float(np.sum((j[:-1] + j[1:]) / 2.0) / (j.size - 1))


def _ranks(values, ids, descending=False):
    keys = sorted(range(len(values)), key=lambda k: ((-values[k] if descending else values[k]), ids[k]))
    ranks = [0] * len(values)
    for r, k in enumerate(keys, start=1):
        ranks[k] = r
    return ranks


def rank_scenarios(scores) -> list[ScenarioScore]:
    """Rank NAAE ascending and NAUC descending, sum the ranks, sort best first.

    ``scores`` is a sequence of ``(scenario_id, naae, nauc)``. Equal values
    are ranked by scenario id, and equal rank sums fall back to the lower
    NAAE, then the scenario id.
    """
    scores = [(str(s), float(a), float(c)) for s, a, c in scores]
    ids = [s for s, _, _ in scores]
    r_naae = _ranks([a for _, a, _ in scores], ids)
    r_nauc = _ranks([c for _, _, c in scores], ids, descending=True)
    out = [ScenarioScore(s, a, c, ra, rc, ra + rc)
           for (s, a, c), ra, rc in zip(scores, r_naae, r_nauc)]
    return sorted(out, key=lambda x: (x.rank_sum, x.naae, x.scenario))


def write_rank_table(path, ranked: list[ScenarioScore]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("scenario", "naae", "nauc", "rank_naae", "rank_nauc", "rank_sum"))
        for s in ranked:
            writer.writerow((s.scenario, repr(s.naae), repr(s.nauc), s.rank_naae, s.rank_nauc, s.rank_sum))


def read_rank_table(path) -> list[ScenarioScore]:
    with open(path, newline="") as fh:
        return [ScenarioScore(r["scenario"], float(r["naae"]), float(r["nauc"]), int(r["rank_naae"]),
                              int(r["rank_nauc"]), int(r["rank_sum"])) for r in csv.DictReader(fh)]


def score_dict(score: ScenarioScore) -> dict:
    return asdict(score)
