"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-m "not slow"`` to skip
the desk-scale training runs) or ``python tests/test_acceptance.py``.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from consortium_rl.dynamics import (NOMINAL_PARAMETERS, SETPOINT_X0, IntegrationStats,
                                    OperatingConditions, default_input_upper, integrate_interval,
                                    kinetic_rates, simulate_episode)
from consortium_rl.harness import ExperimentConfig, run_experiment
from consortium_rl.metrics import naae_per_state, naae_total, nauc, rank_scenarios
from consortium_rl.policy import grad_log_prob_sum, init_policy
from consortium_rl.references import ReferenceSpec
from consortium_rl.returns import ReturnConfig, episode_return, normalize_returns
from consortium_rl.trainer import (AscentStep, EnvConfig, TrainingConfig, UncertaintySpec, episode_rng,
                                   policy_gradient, rollout_batch, sample_disturbance)
from fd_oracle import central_differences, max_relative_error, random_case

P = NOMINAL_PARAMETERS


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail} ({elapsed:.1f} s)")
        return ok
    return emit


def test_criterion_01_gradient_matches_finite_differences(report):
    t0 = time.perf_counter()
    errors = []
    for seed in range(20):
        params, obs, raw = random_case(100 + seed)
        grad, _ = grad_log_prob_sum(params, obs, raw)
        errors.append(max_relative_error(grad, central_differences(params.theta, obs, raw)))
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    ok = worst < 1e-4 and elapsed < 30
    assert report(1, ok, f"max relative error {worst:.2e} over 20 pairs (< 1e-4, < 30 s)", elapsed)


def _richardson_order(u, n=40):
    y = [integrate_interval(SETPOINT_X0, u, n_substeps=k) for k in (n, 2 * n, 4 * n)]
    return math.log2(np.linalg.norm(y[0] - y[1]) / np.linalg.norm(y[1] - y[2]))


def test_criterion_02_integrator_order_and_washout(report):
    t0 = time.perf_counter()
    inputs = [(1.0, 1.0), (0.5, 3.0), (5.0, 0.2), tuple(default_input_upper(P))]
    stats = IntegrationStats()
    for u in inputs:
        integrate_interval(SETPOINT_X0, u, n_substeps=40, stats=stats)
    orders = [_richardson_order(u) for u in inputs]

    op = OperatingConditions(d_l=0.15, g_in=0.0)
    b0 = np.array([0.0, 2.5, 0.7, 0.0, 0.0])
    # a full episode of unit control intervals at the default 20 substeps
    states = simulate_episode(b0, np.zeros((18, 2)), P, op)
    t = np.arange(19.0)[:, None]
    wash = float(np.max(np.abs(states[:, 1:3] / (b0[1:3] * np.exp(-0.15 * t)) - 1)))
    elapsed = time.perf_counter() - t0
    ok = stats.implicit == 0 and all(3.7 <= p <= 4.3 for p in orders) and wash <= 1e-8 and elapsed < 5
    detail = f"orders {', '.join(f'{p:.3f}' for p in orders)} in [3.7, 4.3]; washout rel err {wash:.1e} <= 1e-8"
    assert report(2, ok, detail, elapsed)


def test_criterion_03_kinetics_anchors(report):
    t0 = time.perf_counter()
    *_, qa1, qa2 = kinetic_rates(SETPOINT_X0, [P.k_I_1, P.k_I_2])
    half = max(abs(qa1 - P.q_a_max_1 / 2), abs(qa2 - P.q_a_max_2 / 2))
    mu1, mu2, *_ = kinetic_rates([0.0, 1.0, 1.0, 0.1, 0.1], [5.0, 5.0])
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, (100_000, 5)) * [500.0, 20.0, 20.0, 1.0, 1.0]
    x[rng.random(100_000) < 0.1, 0] = 0.0
    u = rng.uniform(0, 1, (100_000, 2)) * default_input_upper(P)
    m1, m2, *_ = kinetic_rates(x, u)
    bounded = bool(np.all((m1 >= 0) & (m1 <= P.mu_max_1) & (m2 >= 0) & (m2 <= P.mu_max_2)))
    elapsed = time.perf_counter() - t0
    ok = half <= 1e-12 and mu1 == 0.0 and mu2 == 0.0 and bounded and elapsed < 5
    detail = f"|q_a(k_I) - q_a_max/2| = {half:.1e}; mu(g=0) = {mu1}, {mu2}; mu <= mu_max on 1e5 states: {bounded}"
    assert report(3, ok, detail, elapsed)


def test_criterion_04_return_properties(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    n = 10_000
    refs = rng.uniform(1, 6, (18, 2))
    states = rng.uniform(0, 1, (n, 19, 5))
    states[:, 1:, 1:3] = refs + rng.normal(0, 2, (n, 18, 2))
    exact = rng.random(n) < 0.05
    states[exact, 1:, 1:3] = refs
    failures = []
    for scheme in ("tr", "1_sr_1_tr", "1_sr_2_tr", "1_sr_3_tr"):
        for beta in (3.0, 9.0, 27.0):
            cfg = ReturnConfig.saturation(beta, scheme, alpha_max=1.5)
            r = episode_return(states, refs, cfg).rewards
            w = np.append(np.broadcast_to(cfg.stage_weights, 17), cfg.terminal_weight) * 1.5
            on = w > 0
            if not (np.all(r[:, on] > 0) and np.all(r <= w)):
                failures.append(f"bounds {cfg.name}")
            hit = r[:, on] == w[on]
            err_zero = np.all(states[:, 1:, 1:3] == refs, axis=2)[:, on]
            if not np.array_equal(hit, err_zero):
                failures.append(f"equality iff zero error {cfg.name}")
    quad = episode_return(states, refs, ReturnConfig.quadratic()).total
    if not (np.all(quad <= 0) and np.array_equal(quad == 0, exact)):
        failures.append("quadratic")
    for beta in (3.0, 9.0, 27.0):
        for eps in (0.5, 1.0, 3.0):
            cfg = ReturnConfig.saturation(beta, n_steps=2, alpha_max=2.0)
            x = np.zeros((3, 5))
            x[1:, 1:3] = refs[:2] + eps
            if episode_return(x, refs[:2], cfg).rewards[0] != 2.0 * (beta / (beta + eps * eps)) ** 2:
                failures.append(f"coupling beta={beta} eps={eps}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 10
    detail = "bounds, equality-iff-zero-error and coupling on 1e4 trajectories" + (
        f"; broken: {failures}" if failures else "")
    assert report(4, ok, detail, elapsed)


def test_criterion_05_estimator_sanity(report):
    t0 = time.perf_counter()
    env = EnvConfig()
    policy = init_policy(0, env.upper)
    refs = np.tile([3.0, 4.0], (18, 1))
    batch = rollout_batch(policy, env, ReturnConfig.saturation(27.0), refs,
                          [episode_rng(0, 0, k) for k in range(8)])
    batch.totals[:] = 4.2
    grad, _ = policy_gradient(policy, batch)
    new = policy.theta + AscentStep(TrainingConfig()).direction(grad)
    zero_update = bool(np.array_equal(new, policy.theta))
    worst = max(abs(normalize_returns(np.random.default_rng(s).normal(0, 10 ** (s % 7), 100)).mean())
                for s in range(200))
    elapsed = time.perf_counter() - t0
    ok = zero_update and worst <= 1e-10
    assert report(5, ok, f"zero-variance update is zero: {zero_update}; max |mean advantage| {worst:.1e}", elapsed)


def test_criterion_06_uncertainty_sampler(report):
    t0 = time.perf_counter()
    spec = UncertaintySpec(rel_std=0.07)
    rng = np.random.default_rng(6)
    x0 = SETPOINT_X0.as_array()
    draws = [sample_disturbance(spec, x0, P, rng) for _ in range(10_000)]
    rel = np.array([np.append(d.x0 / x0, [d.params.q_a_max_1 / P.q_a_max_1,
                                           d.params.q_a_max_2 / P.q_a_max_2]) for d in draws]) - 1
    std = rel.std(axis=0)
    beyond = int(np.sum(np.abs(rel) > 3 * 0.07))
    elapsed = time.perf_counter() - t0
    ok = bool(np.all((std >= 0.063) & (std <= 0.077))) and beyond == 0 and elapsed < 5
    detail = f"relative std in [{std.min():.4f}, {std.max():.4f}] within [0.063, 0.077]; {beyond} draws beyond 3 sigma"
    assert report(6, ok, detail, elapsed)


def test_criterion_07_metric_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        refs = rng.uniform(0.5, 6, (18, 2))
        traj = rng.uniform(0, 8, (18, 2))
        brute = sum(abs(refs[t, i] - traj[t, i]) / refs[t, i] for t in range(18) for i in range(2)) / 36
        worst = max(worst, abs(naae_total(naae_per_state(traj, refs)) - brute) / brute)
        curve = rng.uniform(0, 1, int(rng.integers(2, 300)))
        area = sum((curve[k] + curve[k + 1]) / 2 for k in range(len(curve) - 1)) / (len(curve) - 1)
        worst = max(worst, abs(nauc(curve) - area) / area)
    ranks_ok = True
    for _ in range(200):
        scores = [(f"s{k}", a, c) for k, (a, c) in enumerate(rng.uniform(0, 1, (int(rng.integers(1, 15)), 2)))]
        brute = {s: 2 + sum(a2 < a for _, a2, _ in scores) + sum(c2 > c for _, _, c2 in scores)
                 for s, a, c in scores}
        ranks_ok &= {r.scenario: r.rank_sum for r in rank_scenarios(scores)} == brute
    const, ramp = nauc(np.ones(150)), nauc(np.linspace(0, 1, 150))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and ranks_ok and const == 1.0 and abs(ramp - 0.5) <= 1e-12
    detail = f"max relative deviation {worst:.1e}; rank sums match: {ranks_ok}; NAUC(1) = {const}, NAUC(ramp) = {ramp:.15f}"
    assert report(7, ok, detail, elapsed)


def _pair_config(case, reference, out):
    return ExperimentConfig.for_case(case, references=(reference,), schemes=("1_sr_1_tr",), betas=(27.0,),
                                     include_qc=True, out=str(out))


def _metrics(root, label):
    return {kind: json.loads((Path(root) / label / kind / "metrics.json").read_text())
            for kind in ("1_sr_1_tr_beta_27", "qc")}


@pytest.fixture(scope="module")
def setpoint_runs(tmp_path_factory):
    """The setpoint pair trained twice from identical manifests; timings kept for the report."""
    root = tmp_path_factory.mktemp("criterion8")
    runs = []
    for name in ("first", "second"):
        cfg = _pair_config(1, ReferenceSpec(values=(3.0, 4.0)), root / name)
        t0 = time.perf_counter()
        manifest = run_experiment(cfg)
        runs.append((root / name, manifest, time.perf_counter() - t0))
    return runs


@pytest.mark.slow
def test_criterion_08_desk_setpoint_learning(report, setpoint_runs):
    root, manifest, elapsed = setpoint_runs[0]
    assert manifest["config"]["training"]["n_mc"] == 100
    assert manifest["config"]["training"]["max_epochs"] == 150
    m = _metrics(root, ReferenceSpec(values=(3.0, 4.0)).label)
    sat, qc = m["1_sr_1_tr_beta_27"], m["qc"]
    ratio = sat["best_mean_return"] / sat["initial_mean_return"]
    a = ratio >= 1.5
    b = sat["naae"] < qc["naae"]
    c = sat["nauc"] > qc["nauc"]
    detail = (f"(a) return ratio {ratio:.3f} >= 1.5: {a}; (b) NAAE {sat['naae']:.3f} < qc {qc['naae']:.3f}: {b}; "
              f"(c) NAUC {sat['nauc']:.3f} > qc {qc['nauc']:.3f}: {c}")
    assert report(8, a and b and c and elapsed < 20 * 60, detail, elapsed)


@pytest.mark.slow
def test_criterion_09_desk_trajectory_learning(report, tmp_path):
    cfg = _pair_config(2, ReferenceSpec(kind="sinusoid", frequency=0.7), tmp_path)
    assert cfg.training.max_epochs == 250
    t0 = time.perf_counter()
    run_experiment(cfg)
    elapsed = time.perf_counter() - t0
    m = _metrics(tmp_path, ReferenceSpec(kind="sinusoid", frequency=0.7).label)
    sat, qc = m["1_sr_1_tr_beta_27"]["naae"], m["qc"]["naae"]
    ok = sat < 0.5 and qc > 1.0 and elapsed < 40 * 60
    assert report(9, ok, f"saturation NAAE {sat:.3f} < 0.5: {sat < 0.5}; qc NAAE {qc:.3f} > 1.0: {qc > 1.0}", elapsed)


@pytest.mark.slow
def test_criterion_10_reproducibility(report, setpoint_runs):
    (a, ma, ta), (b, mb, tb) = setpoint_runs
    # the output directory is the only field allowed to differ
    strip = [{**m, "config": {**m["config"], "output": None}} for m in (ma, mb)]
    same_manifest = strip[0] == strip[1]
    files = sorted(p.relative_to(a) for p in a.rglob("returns.csv")) + [Path("rank_table.csv")]
    identical = all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    ok = same_manifest and identical and len(files) == 3
    detail = f"{len(files)} files bit-identical across two runs: {identical}; manifests equal: {same_manifest}"
    assert report(10, ok, detail, ta + tb)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
