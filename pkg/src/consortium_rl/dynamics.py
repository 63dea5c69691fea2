"""Chemostat model of a two-strain optogenetic E. coli consortium.

States are stored as float arrays whose last axis is ordered
``(g, b1, b2, a1, a2)``:

* ``g``  glucose concentration, mmol/L
* ``b1``, ``b2`` biomass concentrations, g/L
* ``a1``, ``a2`` intracellular amino-acid concentrations, mmol/g

Inputs have last axis ``(I1, I2)``: blue light in W/m^2 and red light in
uW/cm^2. Every function broadcasts over leading axes, so a batch of
episodes is simulated as an array of shape ``(n_episodes, 5)``. Parameter
fields may themselves be arrays of shape ``(n_episodes,)`` when each
episode carries its own perturbed parameters.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IntegrationError, InvalidInputError

STATE_NAMES = ("g", "b1", "b2", "a1", "a2")
INPUT_NAMES = ("I1", "I2")
N_STATES = len(STATE_NAMES)
N_INPUTS = len(INPUT_NAMES)

G, B1, B2, A1, A2 = range(N_STATES)


@dataclass(frozen=True)
class SystemState:
    g: float
    b1: float
    b2: float
    a1: float
    a2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.g, self.b1, self.b2, self.a1, self.a2], dtype=float)

    @classmethod
    def from_array(cls, x) -> "SystemState":
        x = np.asarray(x, dtype=float)
        if x.shape != (N_STATES,):
            raise InvalidInputError(f"expected a state of shape (5,), got {x.shape}")
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class ControlInput:
    I1: float
    I2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.I1, self.I2], dtype=float)


@dataclass(frozen=True)
class KineticParameters:
    """Kinetic constants of both strains (nominal values from the case study)."""

    mu_max_1: float = 0.982
    mu_max_2: float = 0.982
    k_g_1: float = 2.964e-4
    k_g_2: float = 2.964e-4
    f_c: float = 1100.0
    k_a_1: float = 1.7
    k_a_2: float = 0.182
    Y_gb_1: float = 10.18
    Y_gb_2: float = 10.18
    q_a_max_1: float = 0.337
    q_a_max_2: float = 0.036
    n_1: float = 2.0
    n_2: float = 4.865
    k_I_1: float = 1.052
    k_I_2: float = 1.34
    d_a_1: float = 0.0
    d_a_2: float = 0.0

    def validate(self) -> "KineticParameters":
        for field in dataclasses.fields(self):
            value = np.asarray(getattr(self, field.name), dtype=float)
            if not np.all(np.isfinite(value)):
                raise InvalidInputError(f"parameter {field.name} is not finite")
            if field.name.startswith("d_a_"):
                if np.any(value < 0):
                    raise InvalidInputError(f"parameter {field.name} must be >= 0")
            elif np.any(value <= 0):
                raise InvalidInputError(f"parameter {field.name} must be > 0")
        return self

    def replace(self, **changes) -> "KineticParameters":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "KineticParameters":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown kinetic parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()}).validate()


@dataclass(frozen=True)
class OperatingConditions:
    d_l: float = 0.15
    g_in: float = 200.0

    def validate(self) -> "OperatingConditions":
        if not (np.isfinite(self.d_l) and self.d_l > 0):
            raise InvalidInputError("dilution rate d_l must be > 0")
        if not (np.isfinite(self.g_in) and self.g_in >= 0):
            raise InvalidInputError("feed glucose g_in must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {"d_l": self.d_l, "g_in": self.g_in}


NOMINAL_PARAMETERS = KineticParameters()
NOMINAL_OPERATING = OperatingConditions()

# Low-inoculum start-up used for constant setpoints.
SETPOINT_X0 = SystemState(g=1.0, b1=0.005, b2=0.005, a1=1.545e-2, a2=1.655e-3)
# Populations already at (3, 4) g/L, used for time-varying references.
TRAJECTORY_X0 = SystemState(g=50.0, b1=3.0, b2=4.0, a1=1.075e-4, a2=2.998e-5)

INITIAL_CONDITIONS = {"setpoint": SETPOINT_X0, "trajectory": TRAJECTORY_X0}


def default_input_upper(params: KineticParameters) -> np.ndarray:
    """Actuator limits of 10 * k_I, where the n=2 Hill term is already >= 0.99."""
    return np.array([10.0 * float(np.max(params.k_I_1)), 10.0 * float(np.max(params.k_I_2))])


def stack_parameters(param_list) -> KineticParameters:
    """Combine per-episode parameter sets into one with ``(n,)``-shaped fields."""
    if not param_list:
        raise InvalidInputError("need at least one parameter set")
    fields = {}
    for field in dataclasses.fields(KineticParameters):
        values = np.array([float(getattr(p, field.name)) for p in param_list])
        fields[field.name] = values if np.ptp(values) > 0 else float(values[0])
    return KineticParameters(**fields)


def _plain(value):
    arr = np.asarray(value)
    return float(arr) if arr.ndim == 0 else arr.tolist()


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")


def _as_state(state) -> np.ndarray:
    x = state.as_array() if isinstance(state, SystemState) else np.asarray(state, dtype=float)
    if x.shape[-1:] != (N_STATES,):
        raise InvalidInputError(f"state must have last axis of length 5, got shape {x.shape}")
    return x


def _as_input(u) -> np.ndarray:
    u = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    if u.shape[-1:] != (N_INPUTS,):
        raise InvalidInputError(f"input must have last axis of length 2, got shape {u.shape}")
    return u


def _rates(x, u, p):
    g = x[..., G]
    fa1 = p.f_c * x[..., A1]
    fa2 = p.f_c * x[..., A2]
    mu1 = p.mu_max_1 * (g / (g + p.k_g_1)) * (fa1 / (fa1 + p.k_a_1))
    mu2 = p.mu_max_2 * (g / (g + p.k_g_2)) * (fa2 / (fa2 + p.k_a_2))
    i1n = u[..., 0] ** p.n_1
    i2n = u[..., 1] ** p.n_2
    qa1 = p.q_a_max_1 * i1n / (i1n + p.k_I_1**p.n_1)
    qa2 = p.q_a_max_2 * i2n / (i2n + p.k_I_2**p.n_2)
    return mu1, mu2, p.Y_gb_1 * mu1, p.Y_gb_2 * mu2, qa1, qa2


def _rhs(x, u, p, op):
    mu1, mu2, qg1, qg2, qa1, qa2 = _rates(x, u, p)
    b1 = x[..., B1]
    b2 = x[..., B2]
    dx = np.empty(np.broadcast_shapes(x.shape, mu1.shape + (N_STATES,)))
    dx[..., G] = -qg1 * b1 - qg2 * b2 + (op.g_in - x[..., G]) * op.d_l
    dx[..., B1] = (mu1 - op.d_l) * b1
    dx[..., B2] = (mu2 - op.d_l) * b2
    dx[..., A1] = qa1 - (p.d_a_1 + mu1) * x[..., A1]
    dx[..., A2] = qa2 - (p.d_a_2 + mu2) * x[..., A2]
    return dx


def kinetic_rates(state, u, params: KineticParameters = NOMINAL_PARAMETERS):
    """Growth, glucose-uptake and amino-acid synthesis rates.

    Returns ``(mu1, mu2, qg1, qg2, qa1, qa2)``; each has the broadcast
    leading shape of ``state`` and ``u``.
    """
    x = _as_state(state)
    u = _as_input(u)
    _check_finite("state", x)
    _check_finite("input", u)
    if np.any(x < 0):
        raise InvalidInputError("state components must be >= 0")
    if np.any(u < 0):
        raise InvalidInputError("light intensities must be >= 0")
    return _rates(x, u, params)


def rhs(state, u, params: KineticParameters = NOMINAL_PARAMETERS,
        op: OperatingConditions = NOMINAL_OPERATING) -> np.ndarray:
    """Time derivative of the state."""
    kinetic_rates(state, u, params)
    return _rhs(_as_state(state), _as_input(u), params, op)


@dataclass
class IntegrationStats:
    """Mutable counters filled in by :func:`integrate_interval`.

    ``implicit`` counts (episode, substep) pairs that fell back to the
    backward-Euler step; ``clamped`` counts state components reset to zero.
    """

    substeps: int = 0
    implicit: int = 0
    clamped: int = 0


# RK4 is used while h * |d(dg/dt)/dg| stays below this; beyond it (glucose
# depletion, where the eigenvalue reaches ~1e4-1e5 1/h) the substep is redone
# with backward Euler.
STIFFNESS_LIMIT = 1.0
_NEWTON_MAX_ITER = 50
_NEWTON_TOL = 1e-10


def _rate_derivatives(x, p):
    """Per strain: (mu, d mu / d g, d mu / d a) for rows of ``x``."""
    g = x[:, G]
    out = []
    for a_idx, mm, kg, ka in ((A1, p.mu_max_1, p.k_g_1, p.k_a_1),
                              (A2, p.mu_max_2, p.k_g_2, p.k_a_2)):
        fa = p.f_c * x[:, a_idx]
        mg = g / (g + kg)
        ma = fa / (fa + ka)
        dmu_dg = mm * kg / (g + kg) ** 2 * ma
        dmu_da = mm * mg * p.f_c * ka / (fa + ka) ** 2
        out.append((mm * mg * ma, dmu_dg, dmu_da))
    return out


def _glucose_stiffness(x, p, op):
    (_, dg1, _), (_, dg2, _) = _rate_derivatives(x, p)
    return p.Y_gb_1 * dg1 * x[:, B1] + p.Y_gb_2 * dg2 * x[:, B2] + op.d_l


def jacobian(state, u, params: KineticParameters = NOMINAL_PARAMETERS,
             op: OperatingConditions = NOMINAL_OPERATING) -> np.ndarray:
    """Analytic Jacobian of :func:`rhs` w.r.t. the state.

    A single state gives a ``(5, 5)`` matrix and a batch of ``n`` states ``(n, 5, 5)``.
    """
    x0 = _as_state(state)
    x = np.atleast_2d(x0)
    u = np.broadcast_to(_as_input(u), (x.shape[0], N_INPUTS))
    J = _rhs_and_jacobian(x, u, _rows(params, x.shape[0]), op)[1]
    return J[0] if x0.ndim == 1 else J


def _rhs_and_jacobian(x, u, p, op):
    n = x.shape[0]
    f = np.empty((n, N_STATES))
    J = np.zeros((n, N_STATES, N_STATES))
    f[:, G] = (op.g_in - x[:, G]) * op.d_l
    J[:, G, G] = -op.d_l
    rates = _rate_derivatives(x, p)
    hill = ((u[:, 0], p.q_a_max_1, p.n_1, p.k_I_1), (u[:, 1], p.q_a_max_2, p.n_2, p.k_I_2))
    for (mu, dmu_dg, dmu_da), b_idx, a_idx, Y, da, (I, qmax, nh, kI) in zip(
            rates, (B1, B2), (A1, A2), (p.Y_gb_1, p.Y_gb_2), (p.d_a_1, p.d_a_2), hill):
        b = x[:, b_idx]
        a = x[:, a_idx]
        In = I**nh
        f[:, G] -= Y * mu * b
        f[:, b_idx] = (mu - op.d_l) * b
        f[:, a_idx] = qmax * In / (In + kI**nh) - (da + mu) * a
        J[:, G, G] -= Y * b * dmu_dg
        J[:, G, b_idx] = -Y * mu
        J[:, G, a_idx] = -Y * b * dmu_da
        J[:, b_idx, G] = b * dmu_dg
        J[:, b_idx, b_idx] = mu - op.d_l
        J[:, b_idx, a_idx] = b * dmu_da
        J[:, a_idx, G] = -a * dmu_dg
        J[:, a_idx, a_idx] = -(da + mu) - a * dmu_da
    return f, J


def _rows(p, n):
    """Parameters with every array-valued field broadcast to ``(n,)``."""
    changes = {}
    for f in dataclasses.fields(p):
        v = getattr(p, f.name)
        if np.ndim(v):
            changes[f.name] = np.broadcast_to(v, (n,))
    return dataclasses.replace(p, **changes) if changes else p


def _select(p, mask):
    changes = {f.name: getattr(p, f.name)[mask] for f in dataclasses.fields(p)
               if np.ndim(getattr(p, f.name))}
    return dataclasses.replace(p, **changes) if changes else p


def _rk4_step(x, u, p, op, h):
    """One RK4 step; also flags rows whose stages leave the non-negative orthant."""
    bad = np.zeros(x.shape[0], dtype=bool)
    k1 = _rhs(x, u, p, op)
    y = x + 0.5 * h * k1
    bad |= (y < 0).any(axis=1)
    k2 = _rhs(y, u, p, op)
    y = x + 0.5 * h * k2
    bad |= (y < 0).any(axis=1)
    k3 = _rhs(y, u, p, op)
    y = x + h * k3
    bad |= (y < 0).any(axis=1)
    k4 = _rhs(y, u, p, op)
    x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bad |= (x_new < 0).any(axis=1) | ~np.isfinite(x_new).all(axis=1)
    return x_new, bad


def _implicit_euler_step(x, u, p, op, h):
    """Backward Euler solved by damped Newton; iterates stay strictly positive."""
    z = x.copy()
    eye = np.eye(N_STATES)
    for _ in range(_NEWTON_MAX_ITER):
        f, Jf = _rhs_and_jacobian(z, u, p, op)
        resid = z - x - h * f
        J = eye - h * Jf
        delta = -np.linalg.solve(J, resid[..., None])[..., 0]
        # fraction-to-boundary: never move more than 99% of the way to zero
        with np.errstate(divide="ignore", invalid="ignore"):
            limit = np.where(delta < 0, -0.99 * z / delta, np.inf)
        step = np.minimum(1.0, limit.min(axis=1))
        step = np.where(np.isfinite(step), step, 1.0)
        z = z + step[:, None] * delta
        if np.all(np.abs(step[:, None] * delta) <= _NEWTON_TOL * (1.0 + np.abs(z))):
            break
    return z


def integrate_interval(state, u, params: KineticParameters = NOMINAL_PARAMETERS,
                       op: OperatingConditions = NOMINAL_OPERATING, dt_control: float = 1.0,
                       n_substeps: int = 20, stats: IntegrationStats | None = None,
                       check_inputs: bool = True) -> np.ndarray:
    """Advance the state over one control interval with a piecewise-constant input.

    Classical RK4 with ``n_substeps`` equal substeps. A substep whose RK4
    stages would turn negative, or whose glucose eigenvalue exceeds
    ``STIFFNESS_LIMIT / h``, is redone with a backward-Euler step for the
    affected rows only. Any remaining negative component is set to zero and
    counted in ``stats.clamped``.
    """
    if n_substeps < 1:
        raise InvalidInputError("n_substeps must be >= 1")
    if not dt_control > 0:
        raise InvalidInputError("dt_control must be > 0")
    x = _as_state(state)
    u = _as_input(u)
    if check_inputs:
        kinetic_rates(x, u, params)
    lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1],
                               *(np.shape(getattr(params, f.name))
                                 for f in dataclasses.fields(params)))
    n = int(np.prod(lead, dtype=int))
    x = np.broadcast_to(x, lead + (N_STATES,)).reshape(n, N_STATES).copy()
    u = np.broadcast_to(u, lead + (N_INPUTS,)).reshape(n, N_INPUTS)
    p = params
    if any(np.ndim(getattr(p, f.name)) for f in dataclasses.fields(p)):
        p = dataclasses.replace(p, **{f.name: np.broadcast_to(getattr(p, f.name), lead).reshape(n)
                                      for f in dataclasses.fields(p)
                                      if np.ndim(getattr(p, f.name))})
    h = dt_control / n_substeps
    for step in range(n_substeps):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            x_new, bad = _rk4_step(x, u, p, op, h)
            bad |= h * _glucose_stiffness(x, p, op) > STIFFNESS_LIMIT
            if bad.any():
                x_new[bad] = _implicit_euler_step(x[bad], u[bad], _select(p, bad), op, h)
        if not np.all(np.isfinite(x_new)):
            raise IntegrationError(f"non-finite state after substep {step}", step=step)
        negative = x_new < 0
        if negative.any():
            x_new = np.where(negative, 0.0, x_new)
        x = x_new
        if stats is not None:
            stats.substeps += 1
            stats.implicit += int(bad.sum())
            stats.clamped += int(negative.sum())
    return x.reshape(lead + (N_STATES,))


def simulate_episode(x0, actions, params: KineticParameters = NOMINAL_PARAMETERS,
                     op: OperatingConditions = NOMINAL_OPERATING, dt_control: float = 1.0,
                     n_substeps: int = 20, stats: IntegrationStats | None = None) -> np.ndarray:
    """Open-loop rollout.

    ``actions`` has shape ``(..., N_s, 2)``; the result has shape
    ``(..., N_s + 1, 5)`` with ``x0`` at index 0.
    """
    x = _as_state(x0)
    actions = _as_input(actions)
    if actions.ndim < 2:
        raise InvalidInputError("actions must have shape (..., N_s, 2)")
    n_steps = actions.shape[-2]
    lead = np.broadcast_shapes(x.shape[:-1], actions.shape[:-2])
    out = np.empty(lead + (n_steps + 1, N_STATES))
    out[..., 0, :] = x
    for t in range(n_steps):
        try:
            x = integrate_interval(x, actions[..., t, :], params, op, dt_control, n_substeps, stats)
        except IntegrationError as exc:
            raise IntegrationError(f"episode step {t}: {exc}", step=exc.step,
                                   context={"episode_step": t}) from exc
        out[..., t + 1, :] = x
    return out


def load_parameters(path) -> tuple[KineticParameters, OperatingConditions]:
    """Read kinetic and operating parameters from a JSON file.

    Keys follow the model symbols (``mu_max_1``, ``k_g_1``, ..., ``d_l``,
    ``g_in``). Either a flat mapping or one with ``model`` / ``operating``
    sections is accepted; missing keys keep their nominal values.
    """
    data = json.loads(Path(path).read_text())
    return parameters_from_mapping(data)


def parameters_from_mapping(data: dict) -> tuple[KineticParameters, OperatingConditions]:
    if "model" in data or "operating" in data:
        model = dict(data.get("model", {}))
        operating = dict(data.get("operating", {}))
    else:
        operating = {k: data[k] for k in ("d_l", "g_in") if k in data}
        model = {k: v for k, v in data.items() if k not in operating}
    params = KineticParameters.from_dict({**NOMINAL_PARAMETERS.to_dict(), **model})
    unknown = set(operating) - {"d_l", "g_in"}
    if unknown:
        raise ConfigurationError(f"unknown operating parameters: {sorted(unknown)}")
    op = OperatingConditions(**{**NOMINAL_OPERATING.to_dict(),
                                **{k: float(v) for k, v in operating.items()}}).validate()
    return params, op


def write_trajectory_csv(path, states, actions, dt_control: float = 1.0) -> None:
    """Write one episode as ``t,g,b1,b2,a1,a2,I1,I2``.

    The input on row ``t`` is the one applied over ``[t, t + dt)``; the last
    row has no input and leaves those columns empty.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if states.ndim != 2 or actions.shape != (states.shape[0] - 1, N_INPUTS):
        raise InvalidInputError("need states (N_s+1, 5) and actions (N_s, 2)")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("t",) + STATE_NAMES + INPUT_NAMES)
        for t, x in enumerate(states):
            u = [repr(float(v)) for v in actions[t]] if t < len(actions) else ["", ""]
            writer.writerow([repr(t * dt_control)] + [repr(float(v)) for v in x] + u)


def read_actions_csv(path) -> np.ndarray:
    """Read an ``I1,I2`` action file (one row per control interval)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        actions = np.array([[float(r["I1"]), float(r["I2"])] for r in rows], dtype=float)
    except KeyError as exc:
        raise InvalidInputError(f"action file lacks column {exc}") from exc
    return actions.reshape(-1, N_INPUTS)
