"""Experiment orchestration for the four control cases.

A case expands into scenarios, one per (reference, return) pair. Every
scenario trains independently and writes into its own directory; the
experiment root then gets ``rank_table.csv`` and ``manifest.json``.

Cases 1 and 3 track constant setpoints, cases 2 and 4 sinusoids. Cases 3
and 4 add a truncated Gaussian disturbance to every episode.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (INITIAL_CONDITIONS, INPUT_NAMES, NOMINAL_OPERATING, NOMINAL_PARAMETERS,
                       STATE_NAMES, KineticParameters, OperatingConditions, parameters_from_mapping)
from .errors import ConfigurationError, ConsortiumError, InvalidInputError
from .metrics import naae_episode_stats, naae_of_mean, nauc, rank_scenarios, write_rank_table
from .policy import save_checkpoint
from .references import ReferenceSpec, read_reference_csv, reference_series, write_reference_csv
from .returns import (WEIGHT_SCHEMES, ReturnConfig, normalize_curve, read_return_curve_csv,
                      write_return_curve_csv)
from .trainer import (EnvConfig, TrainingConfig, UncertaintySpec, train, write_disturbance_csv,
                      write_epoch_csv)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SETPOINTS = ((1.0, 6.0), (2.0, 5.0), (3.0, 4.0), (3.5, 3.5))
FREQUENCIES = (0.5, 0.7)
BETAS = (3.0, 9.0, 27.0)
SCHEMES = tuple(WEIGHT_SCHEMES)

# (n_mc, max_epochs) per case
DESK_BUDGET = {1: (100, 150), 2: (100, 250), 3: (100, 150), 4: (100, 250)}
PAPER_BUDGET = {1: (500, 500), 2: (500, 800), 3: (500, 500), 4: (500, 800)}

LINEAGE_RULE = ("episode k of epoch m draws action noise from "
                "numpy default_rng([seed, m, k, 0]) and disturbances from default_rng([seed, m, k, 1])")


def _tracks_trajectories(case: int) -> bool:
    return case in (2, 4)


def _uncertain(case: int) -> bool:
    return case in (3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    """One control case: references, return grid, training knobs, model and output location."""

    case: int = 1
    references: tuple[ReferenceSpec, ...] = (ReferenceSpec(values=(3.0, 4.0)),)
    schemes: tuple[str, ...] = SCHEMES
    betas: tuple[float, ...] = BETAS
    include_qc: bool = True
    q: tuple[float, float] = (1.0, 1.0)
    q_terminal: tuple[float, float] = (1.0, 1.0)
    alpha_max: float = 1.0
    training: TrainingConfig = TrainingConfig()
    model: KineticParameters = NOMINAL_PARAMETERS
    operating: OperatingConditions = NOMINAL_OPERATING
    x0: tuple[float, ...] | None = None
    n_steps: int = 18
    dt: float = 1.0
    n_substeps: int = 20
    input_upper: tuple[float, float] | None = None
    obs_scale: tuple[float, ...] | None = None
    out: str = "runs"
    scale: str = "desk"

    def __post_init__(self):
        if self.case not in (1, 2, 3, 4):
            raise ConfigurationError(f"case must be 1, 2, 3 or 4, got {self.case}")
        if _uncertain(self.case) != (self.training.uncertainty is not None):
            raise ConfigurationError(
                f"case {self.case} must {'enable' if _uncertain(self.case) else 'disable'} uncertainty")
        if not self.references:
            raise ConfigurationError("at least one reference is required")
        want = "sinusoid" if _tracks_trajectories(self.case) else "constant"
        if any(r.kind != want for r in self.references):
            raise ConfigurationError(f"case {self.case} tracks {want} references only")
        if len({r.label for r in self.references}) != len(self.references):
            raise ConfigurationError("references must have distinct labels")
        bad = set(self.schemes) - set(SCHEMES)
        if bad:
            raise ConfigurationError(f"unknown weight schemes {sorted(bad)}")
        if bool(self.schemes) != bool(self.betas):
            raise ConfigurationError("a saturation grid needs both schemes and betas")
        if any(b <= 0 for b in self.betas):
            raise ConfigurationError("betas must be > 0")
        if not self.schemes and not self.include_qc:
            raise ConfigurationError("the scenario grid is empty")
        if self.training.max_epochs < 2:
            raise ConfigurationError("max_epochs must be >= 2 to score a learning curve")
        if self.n_steps < 2:
            raise ConfigurationError("n_steps must be >= 2")
        if self.x0 is not None and len(self.x0) != len(STATE_NAMES):
            raise ConfigurationError("x0 needs one value per state")
        if self.scale not in ("desk", "paper"):
            raise ConfigurationError("scale must be 'desk' or 'paper'")
        self.model.validate()
        self.operating.validate()

    @classmethod
    def for_case(cls, case: int, paper_scale: bool = False, seed: int = 0, **overrides):
        """Defaults for a case: its reference set, budget and uncertainty switch."""
        if case not in (1, 2, 3, 4):
            raise ConfigurationError(f"case must be 1, 2, 3 or 4, got {case}")
        n_mc, epochs = (PAPER_BUDGET if paper_scale else DESK_BUDGET)[case]
        training = TrainingConfig(n_mc=n_mc, max_epochs=epochs, patience=epochs, seed=seed,
                                  uncertainty=UncertaintySpec() if _uncertain(case) else None)
        if _tracks_trajectories(case):
            refs = tuple(ReferenceSpec(kind="sinusoid", frequency=f) for f in FREQUENCIES)
            grid = {"schemes": ("1_sr_1_tr",), "betas": (27.0,)}
        else:
            refs = tuple(ReferenceSpec(values=sp) for sp in SETPOINTS)
            grid = {}
        base = {"case": case, "references": refs, "training": training,
                "scale": "paper" if paper_scale else "desk", **grid}
        return cls(**{**base, **overrides})

    @property
    def initial_state(self) -> tuple[float, ...]:
        if self.x0 is not None:
            return tuple(float(v) for v in self.x0)
        key = "trajectory" if _tracks_trajectories(self.case) else "setpoint"
        return dataclasses.astuple(INITIAL_CONDITIONS[key])

    def env(self) -> EnvConfig:
        return EnvConfig(x0=self.initial_state, params=self.model, op=self.operating,
                         n_steps=self.n_steps, dt=self.dt, n_substeps=self.n_substeps,
                         input_upper=self.input_upper, obs_scale=self.obs_scale)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "case": self.case,
            "scale": self.scale,
            "references": [r.to_dict() for r in self.references],
            "returns": {"schemes": list(self.schemes), "betas": list(self.betas),
                        "include_qc": self.include_qc, "q": list(self.q),
                        "q_terminal": list(self.q_terminal), "alpha_max": self.alpha_max},
            "training": self.training.to_dict(),
            "environment": {"x0": None if self.x0 is None else list(self.x0),
                            "n_steps": self.n_steps, "dt": self.dt, "n_substeps": self.n_substeps,
                            "input_upper": None if self.input_upper is None else list(self.input_upper),
                            "obs_scale": None if self.obs_scale is None else list(self.obs_scale)},
            "model": self.model.to_dict(),
            "operating": self.operating.to_dict(),
            "output": {"directory": self.out},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported config schema_version {version!r}; expected {SCHEMA_VERSION}")
        known = {"schema_version", "case", "scale", "references", "returns", "training",
                 "environment", "model", "operating", "output"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
        try:
            params, op = parameters_from_mapping({"model": data.get("model", {}),
                                                  "operating": data.get("operating", {})})
            ret = data.get("returns", {})
            env = data.get("environment", {})
            kwargs = {
                "case": int(data.get("case", 1)),
                "scale": data.get("scale", "desk"),
                "training": TrainingConfig.from_dict(data.get("training", {})),
                "model": params,
                "operating": op,
                "out": data.get("output", {}).get("directory", "runs"),
            }
            if "references" in data:
                kwargs["references"] = tuple(ReferenceSpec.from_dict(r) for r in data["references"])
            for key in ("schemes", "betas", "q", "q_terminal"):
                if key in ret:
                    kwargs[key] = tuple(ret[key])
            for key in ("include_qc", "alpha_max"):
                if key in ret:
                    kwargs[key] = ret[key]
            for key in ("x0", "input_upper", "obs_scale"):
                if env.get(key) is not None:
                    kwargs[key] = tuple(float(v) for v in env[key])
            for key in ("n_steps", "n_substeps"):
                if key in env:
                    kwargs[key] = int(env[key])
            if "dt" in env:
                kwargs["dt"] = float(env["dt"])
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class Scenario:
    """A fully resolved training run."""

    reference: ReferenceSpec
    returns: ReturnConfig
    training: TrainingConfig
    env: EnvConfig

    @property
    def name(self) -> str:
        return self.returns.name

    @property
    def scenario_id(self) -> str:
        return f"{self.reference.label}/{self.name}"

    def to_dict(self) -> dict:
        return {"id": self.scenario_id, "reference": self.reference.to_dict(),
                "returns": self.returns.to_dict(), "training": self.training.to_dict(),
                "environment": self.env.to_dict()}


def expand_scenarios(cfg: ExperimentConfig) -> list[Scenario]:
    """Every (scheme, beta) saturation return plus the quadratic benchmark, for every reference."""
    env = cfg.env()
    out = []
    for ref in cfg.references:
        if not np.isclose(ref.horizon, cfg.n_steps * cfg.dt):
            raise ConfigurationError(f"reference horizon {ref.horizon} differs from n_steps * dt")
        rets = [ReturnConfig.saturation(beta, scheme, cfg.n_steps, cfg.alpha_max)
                for scheme in cfg.schemes for beta in cfg.betas]
        if cfg.include_qc:
            rets.append(ReturnConfig.quadratic(cfg.q, cfg.q_terminal))
        out.extend(Scenario(ref, r, cfg.training, env) for r in rets)
    return out


@dataclass
class ScenarioResult:
    scenario_id: str
    directory: str
    ok: bool
    metrics: dict = field(default_factory=dict)
    error: str | None = None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_batch_csv(path, batch, dt: float = 1.0) -> None:
    """Best-epoch episodes as ``episode,t,g,b1,b2,a1,a2,I1,I2,reward``.

    Inputs on row ``t`` act over ``[t, t + dt)``; the reward on row ``t``
    is earned on arrival at ``t`` so row 0 has none.
    """
    n_ep, n_rows, _ = batch.states.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("episode", "t") + STATE_NAMES + INPUT_NAMES + ("reward",))
        for k in range(n_ep):
            for t in range(n_rows):
                u = [repr(float(v)) for v in batch.actions[k, t]] if t < n_rows - 1 else ["", ""]
                r = repr(float(batch.rewards[k, t - 1])) if t > 0 else ""
                writer.writerow([k, repr(t * dt)] + [repr(float(v)) for v in batch.states[k, t]] + u + [r])


def read_batch_states(path) -> np.ndarray:
    """States ``(n_episodes, N_s + 1, 5)`` from a best-epoch trajectory file."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidInputError(f"{path} holds no trajectories")
    episodes: dict[int, list] = {}
    for r in rows:
        episodes.setdefault(int(r["episode"]), []).append([float(r[s]) for s in STATE_NAMES])
    lengths = {len(v) for v in episodes.values()}
    if len(lengths) != 1:
        raise InvalidInputError("episodes in a trajectory file must have equal length")
    return np.array([episodes[k] for k in sorted(episodes)])


def scenario_metrics(states, refs, mean_returns, kind: str, tracked=(1, 2)) -> dict:
    """NAAE statistics of a best-epoch batch and NAUC of its learning curve."""
    naae_mean, naae_std = naae_episode_stats(states, refs, tracked)
    per_state = naae_of_mean(states, refs, tracked)
    return {"naae": naae_mean, "naae_std": naae_std,
            "naae_of_mean": {STATE_NAMES[i]: float(v) for i, v in zip(tracked, per_state)},
            "nauc": nauc(normalize_curve(mean_returns, kind)),
            "curve_normalization": "max" if kind == "saturation" else "min-max"}


def run_scenario(scn: Scenario, directory) -> dict:
    """Train one scenario and write its artefacts; returns its metrics."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    refs = reference_series(scn.reference, scn.env.n_steps, scn.env.dt)
    res = train(scn.training, scn.env, scn.returns, refs)

    write_return_curve_csv(d / "returns.csv", res.mean_returns, res.std_returns, scn.returns.kind)
    write_epoch_csv(d / "epochs.csv", res.records)
    write_batch_csv(d / "best_epoch_trajectories.csv", res.best_batch, scn.env.dt)
    write_reference_csv(d / "reference.csv", scn.reference, scn.env.n_steps, scn.env.dt)
    if res.disturbances:
        write_disturbance_csv(d / "disturbances.csv", res.disturbances)
    save_checkpoint(d / "checkpoint_best.json", res.best, epoch=res.best_epoch, scenario=scn.scenario_id)
    save_checkpoint(d / "checkpoint_final.json", res.final, epoch=len(res.records) - 1,
                    scenario=scn.scenario_id)

    metrics = scenario_metrics(res.best_batch.states, refs, res.mean_returns, scn.returns.kind,
                               scn.returns.tracked)
    metrics.update({
        "scenario": scn.scenario_id,
        "return_kind": scn.returns.kind,
        "best_epoch": res.best_epoch,
        "best_mean_return": res.best_mean_return,
        "initial_mean_return": float(res.mean_returns[0]),
        "epochs_run": len(res.records),
        "stopped_early": res.stopped_early,
        "clamped": int(res.best_batch.clamped),
        "best_policy_sha256": res.best.content_hash(),
        "final_policy_sha256": res.final.content_hash(),
    })
    (d / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    (d / "scenario.json").write_text(json.dumps(scn.to_dict(), indent=2) + "\n")
    return metrics


def _run_isolated(args) -> ScenarioResult:
    scn, directory = args
    try:
        return ScenarioResult(scn.scenario_id, str(directory), True, run_scenario(scn, directory))
    except (ConsortiumError, ArithmeticError, FloatingPointError) as exc:
        log.warning("scenario %s failed: %s", scn.scenario_id, exc)
        detail = getattr(exc, "diagnostics", None) or getattr(exc, "context", None)
        return ScenarioResult(scn.scenario_id, str(directory), False,
                              error=f"{type(exc).__name__}: {exc}" + (f" {detail}" if detail else ""))


def rank_results(results: list[ScenarioResult]):
    """Rank table rows, ranked separately within each reference."""
    groups: dict[str, list] = {}
    for r in results:
        if r.ok:
            groups.setdefault(r.scenario_id.split("/")[0], []).append(
                (r.scenario_id, r.metrics["naae"], r.metrics["nauc"]))
    rows = []
    for label in sorted(groups):
        rows.extend(rank_scenarios(groups[label]))
    return rows


def run_experiment(cfg: ExperimentConfig, out=None, workers: int = 1, dry_run: bool = False) -> dict:
    """Train every scenario of ``cfg`` and aggregate; returns the manifest."""
    root = Path(out or cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    scenarios = expand_scenarios(cfg)
    jobs = [(s, root / s.reference.label / s.name) for s in scenarios]

    results: list[ScenarioResult] = []
    if not dry_run:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_isolated, jobs))
        else:
            results = [_run_isolated(j) for j in jobs]
        write_rank_table(root / "rank_table.csv", rank_results(results))

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "dry_run": dry_run,
        "seed": cfg.training.seed,
        "rng_lineage": LINEAGE_RULE,
        "scenarios": [],
        "failures": [],
    }
    by_id = {r.scenario_id: r for r in results}
    for scn, directory in jobs:
        entry = {"id": scn.scenario_id, "directory": str(directory.relative_to(root)),
                 "returns": scn.returns.to_dict(), "reference": scn.reference.to_dict()}
        r = by_id.get(scn.scenario_id)
        if r is not None and r.ok:
            entry.update({
                "status": "ok",
                "epochs_run": r.metrics["epochs_run"],
                "best_epoch": r.metrics["best_epoch"],
                "best_policy_sha256": r.metrics["best_policy_sha256"],
                "final_policy_sha256": r.metrics["final_policy_sha256"],
                "files": {p.name: _sha256(p) for p in sorted(directory.glob("*.csv"))},
            })
        elif r is not None:
            entry["status"] = "failed"
            manifest["failures"].append({"id": scn.scenario_id, "error": r.error})
        else:
            entry["status"] = "planned"
        manifest["scenarios"].append(entry)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def collect_metrics(root) -> list[ScenarioResult]:
    """Re-read every ``metrics.json`` below an experiment directory."""
    root = Path(root)
    out = []
    for path in sorted(root.glob("*/*/metrics.json")):
        m = json.loads(path.read_text())
        out.append(ScenarioResult(m["scenario"], str(path.parent), True, m))
    return out


def evaluate_run(directory) -> dict:
    """Recompute a scenario's metrics from its saved CSV files."""
    d = Path(directory)
    scn = json.loads((d / "scenario.json").read_text())
    ret = ReturnConfig.from_dict(scn["returns"])
    refs = read_reference_csv(d / "reference.csv")
    states = read_batch_states(d / "best_epoch_trajectories.csv")
    mean_returns, _, _ = read_return_curve_csv(d / "returns.csv")
    return scenario_metrics(states, refs, mean_returns, ret.kind, ret.tracked)
