"""Randomized verification suites with independent dense oracles.

Each suite draws its instances from a SplitMix64 stream, measures the worst
deviation from an oracle (the *deficiency*) and passes when the deficiency is
at most the tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .action import (
    FlowProblem,
    HamiltonianState,
    action_lower_bound,
    action_quadrature_tolerance,
    evaluate_action,
    evaluate_hamiltonian,
    integrate_gradient_flow,
    integrate_hamilton_equations,
    path_trajectory,
    quadratic_problem,
)
from .errors import ConfigInvalid
from .linalg import cholesky_upper
from .metric import (
    GAUSS_NEWTON,
    IDENTITY,
    USER_DIAGONAL,
    LayerMetric,
    mass_vectors,
    output_metric_matrix,
    woodbury_apply_inverse,
)
from .modules import (
    Linear,
    PointwiseNonlinearity,
    forward,
    init_params,
    layer_jacobians,
    mlp,
    parameter_gradient,
    pullback_to_input,
)
from .optimizer import MSE, SOFTMAX_CE, OptimizerConfig, evaluate_loss, riemannian_sgd_step
from .rng import SplitMix64


@dataclass(frozen=True)
class PropertyResult:
    name: str
    deficiency: float
    tolerance: float
    instances: int
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.deficiency <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        margin = self.tolerance - self.deficiency
        text = (f"{status} {self.name} deficiency={self.deficiency:.6e} "
                f"tolerance={self.tolerance:.6e} margin={margin:.6e} instances={self.instances}")
        return text + (f" {self.detail}" if self.detail else "")


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def _randint(rng: SplitMix64, low: int, high: int) -> int:
    """Uniform integer in ``[low, high]``."""
    return low + int(rng.integers(1, high - low + 1)[0])


def random_spd(rng: SplitMix64, n: int, floor: float = 0.1) -> np.ndarray:
    A = rng.normal((n, n))
    return A @ A.T / n + floor * np.eye(n)


def random_mlp(rng: SplitMix64, max_dim: int = 16, max_params: int | None = None,
               activations=("tanh", "relu"), depth=(1, 3), bias: bool | None = None):
    """Random MLP and its initial parameters."""
    while True:
        n_hidden = _randint(rng, depth[0], depth[1])
        sizes = [_randint(rng, 1, max_dim) for _ in range(n_hidden + 2)]
        act = activations[int(rng.integers(1, len(activations))[0])]
        use_bias = bool(rng.uniform(1)[0] < 0.5) if bias is None else bias
        graph = mlp(sizes, act, bias=use_bias)
        if max_params is None or graph.param_count <= max_params:
            break
    params = init_params(graph, int(rng.next_u64(1)[0]))
    # widen the initial weights a little so activations leave the linear regime
    params = params.with_flat(params.flat() * 1.5)
    return graph, params


def input_jacobian_oracle(graph, params, x) -> np.ndarray:
    """``dF/dx`` of a sequential chain by explicit matrix products."""
    J = np.eye(graph.input_dim)
    h = np.asarray(x, dtype=np.float64)
    for leaf, w in zip(graph.leaves(), params.blocks):
        if isinstance(leaf, Linear):
            W = w.reshape(leaf.output_dim, leaf.input_dim)
            J = W @ J
            h = W @ h
        elif isinstance(leaf, PointwiseNonlinearity):
            if leaf.activation == "tanh":
                d = 1.0 - np.tanh(h) ** 2
                h = np.tanh(h)
            elif leaf.activation == "relu":
                d = (h > 0).astype(float)
                h = np.maximum(h, 0.0)
            else:
                d = np.ones_like(h)
            J = d[:, None] * J
        else:
            h = h + w
    return J


def woodbury_suite(rng: SplitMix64, count: int = 500) -> tuple[float, str]:
    worst = 0.0
    for _ in range(count):
        n = _randint(rng, 1, 200)
        r = _randint(rng, 1, 10)
        mass = 10.0 ** rng.uniform(n, -2.0, 2.0)
        K = rng.normal((r, n)) * rng.uniform(1, 0.1, 3.0)[0]
        v = rng.normal(n)
        G = np.diag(mass) + K.T @ K
        worst = max(worst, _rel(woodbury_apply_inverse(LayerMetric(0, mass, K), v), np.linalg.solve(G, v)))
    return worst, "metric=relative_l2"


def cholesky_pullback_suite(rng: SplitMix64, count: int = 200) -> tuple[float, str]:
    worst = 0.0
    for _ in range(count):
        graph, params = random_mlp(rng, max_dim=20, depth=(0, 3))
        x = rng.normal(graph.input_dim)
        _, tape = forward(graph, params, x)
        L_o = cholesky_upper(random_spd(rng, graph.output_dim))
        M = L_o.T @ L_o
        L_x = pullback_to_input(L_o, tape)
        J = input_jacobian_oracle(graph, params, x)
        worst = max(worst, _rel(L_x.T @ L_x, J.T @ M @ J))
    return worst, "metric=relative_frobenius"


def _fd_gradient(graph, params, X, T, h):
    flat = params.flat()
    g = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        up = evaluate_loss(MSE, forward(graph, params.with_flat(flat + e), X)[0], T)[0]
        dn = evaluate_loss(MSE, forward(graph, params.with_flat(flat - e), X)[0], T)[0]
        g[i] = (up - dn) / (2 * h)
    return g


def _fd_jacobian(graph, params, x, h):
    flat = params.flat()
    cols = []
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        cols.append((forward(graph, params.with_flat(flat + e), x)[0]
                     - forward(graph, params.with_flat(flat - e), x)[0]) / (2 * h))
    return np.stack(cols, axis=1)


def gradient_check_suite(rng: SplitMix64, count: int = 100, step: float = 1e-6) -> tuple[float, str]:
    worst = 0.0
    for _ in range(count):
        graph, params = random_mlp(rng, max_dim=16, depth=(1, 2))
        B = _randint(rng, 1, 4)
        X = rng.normal((B, graph.input_dim))
        T = rng.normal((B, graph.output_dim))
        Y, tape = forward(graph, params, X)
        _, dY = evaluate_loss(MSE, Y, T)
        grad = np.concatenate(parameter_gradient(tape, dY))
        worst = max(worst, _rel(grad, _fd_gradient(graph, params, X, T, step)))
        _, tape1 = forward(graph, params, X[0])
        J = np.concatenate([j.matrix for j in layer_jacobians(tape1)], axis=1)
        worst = max(worst, _rel(J, _fd_jacobian(graph, params, X[0], step)))
    return worst, "metric=relative_l2 fd=central"


def _quadratic_instance(rng: SplitMix64, dim: int | None = None, eta: float | None = None) -> FlowProblem:
    n = dim or _randint(rng, 1, 5)
    A = random_spd(rng, n, floor=0.2)
    b = rng.normal(n)
    g = random_spd(rng, n, floor=0.5)
    return quadratic_problem(A, b, g, float(rng.uniform(1, 0.3, 1.5)[0]) if eta is None else eta)


def hamiltonian_suite(rng: SplitMix64, count: int = 20, ds: float = 1e-3) -> tuple[float, str]:
    worst = 0.0
    for _ in range(count):
        problem = _quadratic_instance(rng)
        traj = integrate_gradient_flow(problem, rng.normal(problem.dim), 1.0, ds)
        scale = max(np.max(np.abs(traj.kinetic)), np.max(np.abs(traj.potential_term)))
        worst = max(worst, float(np.max(np.abs(traj.hamiltonian)) / scale))
    return worst, "metric=max|H|/max_term"


def diagonal_metric_problem(A, b, eta: float) -> FlowProblem:
    """Quadratic ``h`` with the position-dependent metric ``diag(1 + phi_i^2)``."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]

    def dginv(phi):
        out = np.zeros((n, n, n))
        i = np.arange(n)
        out[i, i, i] = -2.0 * phi / (1.0 + phi ** 2) ** 2
        return out

    return FlowProblem(
        n,
        lambda phi: 0.5 * phi @ A @ phi - b @ phi,
        lambda phi: A @ phi - b,
        lambda phi: A,
        lambda phi: np.diag(1.0 + phi ** 2),
        lambda phi: np.diag(1.0 / (1.0 + phi ** 2)),
        dginv,
        eta,
    )


def action_problems(rng: SplitMix64, count: int = 10) -> list[FlowProblem]:
    problems = []
    for i in range(count):
        if i % 2 == 0:
            problems.append(_quadratic_instance(rng))
        else:
            n = _randint(rng, 1, 4)
            problems.append(diagonal_metric_problem(random_spd(rng, n, 0.2), rng.normal(n),
                                                    float(rng.uniform(1, 0.3, 1.5)[0])))
    return problems


def perturbed_path(traj, direction, amplitude: float, modes: int = 1):
    """Gradient path plus ``amplitude * sin(modes pi s / S) * direction``; endpoints fixed."""
    s = traj.s
    span = s[-1] - s[0]
    w = modes * np.pi / span
    bump = np.sin(w * (s - s[0]))
    dbump = w * np.cos(w * (s - s[0]))
    phi = traj.phi + amplitude * bump[:, None] * direction[None, :]
    vel = traj.velocity + amplitude * dbump[:, None] * direction[None, :]
    return phi, vel


def action_bound_suite(rng: SplitMix64, count: int = 10, perturbations: int = 50,
                       ds: float = 1e-2, s_end: float = 1.0) -> tuple[float, str]:
    """Worst violation of ``S >= eta |dh| - tol`` relative to ``eta |dh|``."""
    worst = 0.0
    min_excess = np.inf
    for problem in action_problems(rng, count):
        flow = integrate_gradient_flow(problem, rng.normal(problem.dim), s_end, ds)
        paths = [flow]
        for _ in range(perturbations):
            d = rng.normal(problem.dim)
            amp = float(rng.uniform(1, 0.01, 0.5)[0])
            modes = _randint(rng, 1, 3)
            phi, vel = perturbed_path(flow, d / np.linalg.norm(d), amp, modes)
            paths.append(path_trajectory(problem, flow.s, phi, vel))
        for traj in paths:
            lower = action_lower_bound(traj, problem)
            excess = evaluate_action(traj) - lower + action_quadrature_tolerance(traj)
            worst = max(worst, -excess / max(lower, 1e-300))
            min_excess = min(min_excess, excess)
    return max(worst, 0.0), f"min_excess={min_excess:.6e} trajectories={count * (perturbations + 1)}"


def hamilton_flow_suite(rng: SplitMix64, count: int = 20, ds: float = 1e-3) -> tuple[float, str]:
    """``eta = 0`` with a constant metric: positions follow ``phi0 + s g^{-1} p0``."""
    worst = 0.0
    for _ in range(count):
        problem = _quadratic_instance(rng, eta=0.0)
        phi0 = rng.normal(problem.dim)
        p0 = rng.normal(problem.dim)
        traj = integrate_hamilton_equations(problem, HamiltonianState(phi0, p0), 1.0, ds)
        line = phi0[None, :] + traj.s[:, None] * (problem.inverse_metric(phi0) @ p0)[None, :]
        worst = max(worst, float(np.max(np.abs(traj.phi - line))))
    return worst, "metric=max_abs_position_error"


def hamiltonian_drift_suite(rng: SplitMix64, count: int = 20, ds: float = 1e-3) -> tuple[float, str]:
    worst = 0.0
    for i in range(count):
        problem = _quadratic_instance(rng, eta=0.0 if i % 2 == 0 else None)
        state = HamiltonianState(rng.normal(problem.dim), rng.normal(problem.dim))
        traj = integrate_hamilton_equations(problem, state, 1.0, ds)
        h0 = evaluate_hamiltonian(state, problem)
        worst = max(worst, float(np.max(np.abs(traj.hamiltonian - h0))))
    return worst, "metric=max_abs_drift interval=1"


def _dense_step(graph, params, X, T, config: OptimizerConfig):
    Y, tape = forward(graph, params, X)
    _, dY = evaluate_loss(config.loss, Y, T)
    grads = parameter_gradient(tape, dY)
    jac = [j.matrix for j in layer_jacobians(tape)]
    masses = mass_vectors(graph.block_sizes, config.masses)
    B = X.shape[0]
    out = []
    for J, d, g in zip(jac, masses, grads):
        G = np.diag(d)
        for b in range(B):
            M = output_metric_matrix(config.output_metric, Y[b], config.epsilon, config.output_diagonal)
            G = G + J[b].T @ M @ J[b] / B
        out.append(-config.learning_rate * np.linalg.solve(G, g))
    return out


def step_oracle_suite(rng: SplitMix64, count: int = 100) -> tuple[float, str]:
    worst = 0.0
    kinds = (IDENTITY, GAUSS_NEWTON, USER_DIAGONAL)
    for i in range(count):
        graph, params = random_mlp(rng, max_dim=8, max_params=100)
        kind = kinds[i % 3]
        B = _randint(rng, 1, 4)
        X = rng.normal((B, graph.input_dim))
        if kind == GAUSS_NEWTON:
            loss = SOFTMAX_CE
            T = rng.integers(B, graph.output_dim)
        else:
            loss = MSE
            T = rng.normal((B, graph.output_dim))
        masses = [float(m) for m in rng.uniform(graph.n_layers, 0.2, 2.0)]
        config = OptimizerConfig(
            learning_rate=float(rng.uniform(1, 0.01, 0.5)[0]), masses=masses, output_metric=kind,
            epsilon=1e-3, output_diagonal=rng.uniform(graph.output_dim, 0.5, 2.0) if kind == USER_DIAGONAL else None,
            loss=loss,
        )
        new, _ = riemannian_sgd_step(graph, params, (X, T), config)
        for a, delta in enumerate(_dense_step(graph, params, X, T, config)):
            worst = max(worst, _rel(new.blocks[a] - params.blocks[a], delta))
    return worst, "metric=relative_l2 per layer"


SUITES: dict[str, tuple[Callable, float]] = {
    "woodbury": (woodbury_suite, 1e-8),
    "cholesky_pullback": (cholesky_pullback_suite, 1e-12),
    "gradient_check": (gradient_check_suite, 1e-5),
    "hamiltonian": (hamiltonian_suite, 1e-6),
    "action_bound": (action_bound_suite, 0.0),
    "hamilton_flow": (hamilton_flow_suite, 1e-8),
    "hamiltonian_drift": (hamiltonian_drift_suite, 1e-7),
    "step_oracle": (step_oracle_suite, 1e-8),
}


def run_suite(name: str, seed: int = 0, instances: int | None = None,
              tolerance: float | None = None) -> PropertyResult:
    if name not in SUITES:
        raise ConfigInvalid(f"unknown verification suite {name!r}; known: {sorted(SUITES)}")
    fn, default_tol = SUITES[name]
    rng = SplitMix64(seed).spawn(sorted(SUITES).index(name))
    kwargs = {} if instances is None else {"count": int(instances)}
    deficiency, detail = fn(rng, **kwargs)
    count = instances if instances is not None else fn.__defaults__[0]
    tol = default_tol if tolerance is None else float(tolerance)
    return PropertyResult(name, float(deficiency), tol, int(count), detail)
