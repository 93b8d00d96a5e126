"""Gradient flow as the minimizer of an action.

For a metric ``g`` and potential ``h`` the Lagrangian is::

    L = 1/2 g_IJ phidot^I phidot^J + 1/2 eta^2 g^IJ d_I h d_J h

Its action is bounded below by ``eta |h(end) - h(start)|`` with equality on
the gradient paths ``phidot = -/+ eta g^{-1} grad h``, and its Hamiltonian::

    H = 1/2 g^IJ (p_I - eta d_I h)(p_J + eta d_J h)

vanishes on those paths. Everything here integrates with fixed-step RK4 and
integrates the action with the trapezoidal rule on the same grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, NonFinite
from .metric import block_diagonal_dense
from .modules import ParameterState, forward, parameter_gradient


@dataclass
class FlowProblem:
    """Potential ``h`` and metric ``g`` on ``R^dim``.

    ``inverse_metric_derivative(phi)[I, K, L]`` is ``d g^{KL} / d phi^I``.
    """

    dim: int
    potential: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    metric: Callable[[np.ndarray], np.ndarray]
    inverse_metric: Callable[[np.ndarray], np.ndarray]
    inverse_metric_derivative: Callable[[np.ndarray], np.ndarray]
    eta: float = 1.0

    def flow_velocity(self, phi, sign: float = -1.0) -> np.ndarray:
        """``sign * eta * g^{-1} grad h``; ``sign=-1`` is descent."""
        return sign * self.eta * self.inverse_metric(phi) @ self.gradient(phi)


def quadratic_problem(A, b=None, metric=None, eta: float = 1.0) -> FlowProblem:
    """``h = 1/2 phi^T A phi - b^T phi`` with a constant metric (identity by default)."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    A = 0.5 * (A + A.T)
    b = np.zeros(n) if b is None else np.asarray(b, dtype=np.float64)
    return constant_metric_problem(
        lambda phi: 0.5 * phi @ A @ phi - b @ phi,
        lambda phi: A @ phi - b,
        lambda phi: A,
        np.eye(n) if metric is None else metric,
        eta,
    )


def constant_metric_problem(potential, gradient, hessian, metric, eta: float = 1.0) -> FlowProblem:
    g = np.asarray(metric, dtype=np.float64)
    ginv = np.linalg.inv(g)
    n = g.shape[0]
    zero = np.zeros((n, n, n))
    return FlowProblem(n, potential, gradient, hessian,
                       lambda phi: g, lambda phi: ginv, lambda phi: zero, eta)


def finite_difference_derivative(fn: Callable[[np.ndarray], np.ndarray], step: float = 1e-5):
    """Central-difference derivative: returns ``phi -> array[I, ...] = d fn / d phi^I``."""

    def derivative(phi):
        phi = np.asarray(phi, dtype=np.float64)
        rows = []
        for i in range(phi.size):
            e = np.zeros_like(phi)
            e[i] = step
            rows.append((np.asarray(fn(phi + e)) - np.asarray(fn(phi - e))) / (2 * step))
        return np.stack(rows)

    return derivative


@dataclass
class HamiltonianState:
    position: np.ndarray
    momentum: np.ndarray


@dataclass
class Trajectory:
    """Samples on the grid ``s_k``; per-sample Lagrangian terms, Hamiltonian and potential."""

    s: np.ndarray
    phi: np.ndarray
    velocity: np.ndarray
    momentum: np.ndarray
    kinetic: np.ndarray
    potential_term: np.ndarray
    hamiltonian: np.ndarray
    potential: np.ndarray

    @property
    def lagrangian(self) -> np.ndarray:
        return self.kinetic + self.potential_term

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])

    def __len__(self):
        return self.s.size


def evaluate_hamiltonian(state: HamiltonianState, problem: FlowProblem) -> float:
    """Factored form ``1/2 (p - eta dh)^T g^{-1} (p + eta dh)``."""
    phi = np.asarray(state.position, dtype=np.float64)
    p = np.asarray(state.momentum, dtype=np.float64)
    dh = problem.eta * problem.gradient(phi)
    return float(0.5 * (p - dh) @ problem.inverse_metric(phi) @ (p + dh))


def _sample(problem: FlowProblem, s, phi, velocity, momentum=None) -> Trajectory:
    n = len(s)
    kin = np.empty(n)
    pot = np.empty(n)
    ham = np.empty(n)
    hval = np.empty(n)
    mom = np.empty_like(phi)
    eta = problem.eta
    for k in range(n):
        g = problem.metric(phi[k])
        ginv = problem.inverse_metric(phi[k])
        dh = problem.gradient(phi[k])
        p = g @ velocity[k] if momentum is None else momentum[k]
        mom[k] = p
        kin[k] = 0.5 * velocity[k] @ g @ velocity[k]
        pot[k] = 0.5 * eta * eta * dh @ ginv @ dh
        ham[k] = 0.5 * (p - eta * dh) @ ginv @ (p + eta * dh)
        hval[k] = problem.potential(phi[k])
    traj = Trajectory(np.asarray(s, dtype=np.float64), phi, velocity, mom, kin, pot, ham, hval)
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(traj.lagrangian))):
        raise NonFinite("trajectory blew up")
    return traj


def _grid(s_end: float, ds: float) -> tuple[np.ndarray, int]:
    if not ds > 0 or not s_end > 0:
        raise ValueError("s_end and ds must be positive")
    steps = int(round(s_end / ds))
    if steps < 1 or abs(steps * ds - s_end) > 1e-9 * s_end:
        raise ValueError(f"s_end={s_end} is not a multiple of ds={ds}")
    return np.arange(steps + 1) * ds, steps


def _rk4(rhs, y0, ds, steps) -> np.ndarray:
    ys = np.empty((steps + 1,) + np.shape(y0))
    y = np.array(y0, dtype=np.float64)
    ys[0] = y
    for k in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * ds * k1)
        k3 = rhs(y + 0.5 * ds * k2)
        k4 = rhs(y + ds * k3)
        y = y + (ds / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFinite(f"integration blew up at step {k + 1}")
        ys[k + 1] = y
    return ys


def integrate_gradient_flow(problem: FlowProblem, phi0, s_end: float, ds: float, sign: float = -1.0) -> Trajectory:
    """RK4 solution of ``phidot = sign * eta * g^{-1} grad h`` on ``[0, s_end]``."""
    phi0 = np.asarray(phi0, dtype=np.float64)
    if phi0.shape != (problem.dim,):
        raise DimensionMismatch(f"phi0 has shape {phi0.shape}, problem dim is {problem.dim}")
    s, steps = _grid(s_end, ds)
    rhs = lambda phi: problem.flow_velocity(phi, sign)
    phi = _rk4(rhs, phi0, ds, steps)
    velocity = np.stack([rhs(p) for p in phi])
    return _sample(problem, s, phi, velocity)


def path_trajectory(problem: FlowProblem, s, phi, velocity) -> Trajectory:
    """Trajectory for an arbitrary sampled path with known velocities."""
    return _sample(problem, np.asarray(s, dtype=np.float64), np.asarray(phi, dtype=np.float64),
                   np.asarray(velocity, dtype=np.float64))


def hamilton_rhs(problem: FlowProblem):
    """Vector field on ``(phi, p)`` stacked as a ``(2, n)`` array."""
    eta2 = problem.eta ** 2

    def rhs(state):
        phi, p = state
        ginv = problem.inverse_metric(phi)
        dginv = problem.inverse_metric_derivative(phi)
        dh = problem.gradient(phi)
        hess = problem.hessian(phi)
        phidot = ginv @ p
        pdot = (-0.5 * np.einsum("ikl,k,l->i", dginv, p, p)
                + 0.5 * eta2 * np.einsum("ikl,k,l->i", dginv, dh, dh)
                + eta2 * hess @ (ginv @ dh))
        return np.stack([phidot, pdot])

    return rhs


def integrate_hamilton_equations(problem: FlowProblem, state0: HamiltonianState, s_end: float, ds: float) -> Trajectory:
    """RK4 on ``phidot = g^{-1} p`` and ``pdot = -dH/dphi``."""
    phi0 = np.asarray(state0.position, dtype=np.float64)
    p0 = np.asarray(state0.momentum, dtype=np.float64)
    if phi0.shape != (problem.dim,) or p0.shape != (problem.dim,):
        raise DimensionMismatch("state dimensions do not match the problem")
    y0 = np.stack([phi0, p0])
    s, steps = _grid(s_end, ds)
    ys = _rk4(hamilton_rhs(problem), y0, ds, steps)
    phi, p = ys[:, 0], ys[:, 1]
    velocity = np.stack([problem.inverse_metric(x) @ q for x, q in zip(phi, p)])
    return _sample(problem, s, phi, velocity, momentum=p)


def evaluate_action(trajectory: Trajectory, problem: FlowProblem | None = None) -> float:
    """Trapezoidal ``int L ds`` over the trajectory grid."""
    if len(trajectory) < 2:
        raise ValueError("the action needs at least two samples")
    value = float(np.trapezoid(trajectory.lagrangian, trajectory.s))
    if not np.isfinite(value):
        raise NonFinite("action is not finite")
    return value


def action_quadrature_tolerance(trajectory: Trajectory) -> float:
    """Conservative estimate of the trapezoidal error of ``evaluate_action``.

    Twice the larger of the Euler-Maclaurin end correction and, when the grid
    has an even number of intervals, the Richardson estimate against the
    every-other-sample rule; plus a roundoff floor.
    """
    f = trajectory.lagrangian
    s = trajectory.s
    h = trajectory.ds
    n = f.size
    if n >= 3:
        d0 = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
        d1 = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * h)
        em = abs(h * h / 12.0 * (d1 - d0))
    else:
        em = abs(f[1] - f[0]) * h
    rich = 0.0
    if (n - 1) % 2 == 0 and n >= 5:
        rich = abs(np.trapezoid(f, s) - np.trapezoid(f[::2], s[::2])) / 3.0
    floor = 64 * np.finfo(float).eps * float(np.trapezoid(np.abs(f), s))
    return 2.0 * max(em, rich) + floor


def action_lower_bound(trajectory: Trajectory, problem: FlowProblem) -> float:
    """``eta |h(end) - h(start)|``."""
    return problem.eta * abs(float(trajectory.potential[-1] - trajectory.potential[0]))


def euler_lagrange_residual(trajectory: Trajectory, problem: FlowProblem) -> np.ndarray:
    """Gradient of the discretized action w.r.t. interior samples, divided by ``ds``.

    The discrete action uses midpoint kinetic terms on each interval and
    trapezoidal potential terms at the nodes. Shape ``(N - 2, dim)``.
    """
    phi = trajectory.phi
    h = trajectory.ds
    eta2 = problem.eta ** 2
    v = np.diff(phi, axis=0) / h
    mids = 0.5 * (phi[1:] + phi[:-1])
    gv = np.empty_like(v)
    dkin = np.empty_like(v)
    for k, (m, vk) in enumerate(zip(mids, v)):
        g = problem.metric(m)
        dginv = problem.inverse_metric_derivative(m)
        dg = -np.einsum("ab,ibc,cd->iad", g, dginv, g)
        gv[k] = g @ vk
        dkin[k] = 0.5 * np.einsum("iab,a,b->i", dg, vk, vk)
    out = np.empty((len(phi) - 2, problem.dim))
    for k in range(1, len(phi) - 1):
        x = phi[k]
        ginv = problem.inverse_metric(x)
        dh = problem.gradient(x)
        grad_pot = eta2 * (problem.hessian(x) @ (ginv @ dh)
                           + 0.5 * np.einsum("ikl,k,l->i", problem.inverse_metric_derivative(x), dh, dh))
        out[k - 1] = (gv[k - 1] - gv[k]) / h + 0.5 * (dkin[k - 1] + dkin[k]) + grad_pot
    return out


def neural_flow_problem(graph, params: ParameterState, batch, loss: str, config, fd_step: float = 1e-5) -> FlowProblem:
    """Flow problem on a network's flattened parameters.

    ``h`` is the batch loss and ``g`` the materialized block-diagonal layerwise
    metric (dense on purpose: this is the oracle side). Hessian and metric
    derivatives come from central differences with step ``fd_step``.
    """
    from .optimizer import evaluate_loss, layer_metrics

    X, T = batch
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != graph.input_dim:
        raise DimensionMismatch("batch inputs do not match the graph input dimension")
    n = graph.param_count
    cache: dict = {}

    def state(phi):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (n,):
            raise DimensionMismatch(f"parameter vector of length {phi.size}, expected {n}")
        key = phi.tobytes()
        if key not in cache:
            p = params.with_flat(phi)
            Y, tape = forward(graph, p, X)
            value, dY = evaluate_loss(loss, Y, T)
            grad = np.concatenate(parameter_gradient(tape, dY))
            G = block_diagonal_dense(layer_metrics(graph, p, X, config, tape=tape, Y=Y))
            if len(cache) > 64:
                cache.clear()
            cache[key] = (value, grad, G, np.linalg.inv(G))
        return cache[key]

    gradient = lambda phi: state(phi)[1]
    inverse_metric = lambda phi: state(phi)[3]
    hess_fd = finite_difference_derivative(gradient, fd_step)

    def hessian(phi):
        H = hess_fd(phi)
        return 0.5 * (H + H.T)

    return FlowProblem(
        n,
        lambda phi: state(phi)[0],
        gradient,
        hessian,
        lambda phi: state(phi)[2],
        inverse_metric,
        finite_difference_derivative(inverse_metric, fd_step),
        config.learning_rate,
    )
