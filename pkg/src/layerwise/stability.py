"""Leave-one-replaced stability experiment under layerwise-metric gradient flow.

Two copies of a model start from the same parameters and follow the
metric-preconditioned gradient flow of the mean squared loss, one on a
dataset ``S`` and one on ``S'`` (``S`` with sample ``k`` replaced). The flow
is discretized with explicit Euler steps that are small against the fastest
output time scale. Along the way we record everything needed to estimate

* ``kappa``: largest spectral norm of a per-sample Jacobian ``d F(x_i) / d theta``,
* ``L``: largest per-sample loss gradient ``|y_i - yhat_i|``,
* ``xi``: smallest eigenvalue of the kernel ``H = (1/n) Jbar G^{-1} Jbar^T``,
* ``mu``: smallest mass entry,

and compare the late-time output divergence with ``2 kappa^2 L / (xi sqrt(n) mu)``.

The constants are measured along the realized trajectories (inputs of both
datasets, every recorded step), so they hold on that domain only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFinite, RankDeficient
from .linalg import min_eigenvalue
from .metric import LayerMetric, assemble_layer_metrics, mass_vectors, woodbury_apply_inverse
from .modules import ParameterState, forward, layer_jacobians
from .rng import SplitMix64
from .optimizer import OptimizerConfig, layer_metrics

RANK_TOL = 1e-10


@dataclass(frozen=True)
class PairedDatasets:
    inputs: np.ndarray
    targets: np.ndarray
    index: int
    replacement_input: np.ndarray
    replacement_target: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        T = np.asarray(self.targets, dtype=np.float64).reshape(X.shape[0], -1)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", T)
        object.__setattr__(self, "replacement_input", np.asarray(self.replacement_input, dtype=np.float64).reshape(X.shape[1]))
        object.__setattr__(self, "replacement_target", np.asarray(self.replacement_target, dtype=np.float64).reshape(T.shape[1]))
        if not 0 <= self.index < X.shape[0]:
            raise DimensionMismatch(f"replaced index {self.index} outside 0..{X.shape[0] - 1}")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def base(self):
        return self.inputs, self.targets

    def replaced(self):
        X = self.inputs.copy()
        T = self.targets.copy()
        X[self.index] = self.replacement_input
        T[self.index] = self.replacement_target
        return X, T

    def with_n(self, n: int) -> "PairedDatasets":
        return PairedDatasets(self.inputs[:n], self.targets[:n], min(self.index, n - 1),
                              self.replacement_input, self.replacement_target)


def teacher_dataset(graph, params: ParameterState, n: int, seed: int, scale: float = 0.05,
                    index: int = 0, null_replacement: bool = False) -> PairedDatasets:
    """Orthonormal inputs with targets close to the initial outputs.

    Inputs are ``n + 1`` rows of a random orthogonal matrix (the last one is
    the replacement sample), which keeps the kernel well conditioned. Targets
    are ``F(x; params) + scale * tanh(2 x.w)`` for a random teacher ``w``, so
    the flow stays near initialization and the Jacobian bound hardly moves.
    """
    d = graph.input_dim
    if d < n + 1:
        raise DimensionMismatch(f"input_dim {d} must exceed n = {n} for orthonormal inputs")
    rng = SplitMix64(seed)
    Q, _ = np.linalg.qr(rng.normal((d, d)))
    X = Q[:n + 1]
    w = rng.normal(d)
    y0, _ = forward(graph, params, X)
    T = y0 + scale * np.tanh(2.0 * X @ w)[:, None]
    if null_replacement:
        return PairedDatasets(X[:n], T[:n], index, X[index], T[index])
    return PairedDatasets(X[:n], T[:n], index, X[n], T[n])


def stability_bound(kappa: float, lipschitz: float, xi: float, n: int, mu: float) -> float:
    """``2 kappa^2 L / (xi sqrt(n) mu)``."""
    return float(2.0 * kappa ** 2 * lipschitz / (xi * np.sqrt(n) * mu))


@dataclass(frozen=True)
class StabilityConstants:
    kappa: float
    lipschitz: float
    xi: float
    mu: float
    n: int

    @property
    def bound(self) -> float:
        return stability_bound(self.kappa, self.lipschitz, self.xi, self.n, self.mu)

    @property
    def disturbance_bound(self) -> float:
        """Per-output bound ``2 kappa^2 L / (n mu)``."""
        return 2.0 * self.kappa ** 2 * self.lipschitz / (self.n * self.mu)

    @property
    def stacked_disturbance_bound(self) -> float:
        """Bound on the stacked disturbance, ``2 kappa^2 L / (sqrt(n) mu)``."""
        return float(2.0 * self.kappa ** 2 * self.lipschitz / (np.sqrt(self.n) * self.mu))


def _stacked_layer_jacobians(jacobians) -> list[np.ndarray]:
    """``(B, p, n_alpha) -> (B * p, n_alpha)`` for every layer."""
    return [J.reshape(J.shape[0] * J.shape[1], J.shape[-1]) for J in jacobians]


def _kernel(jacobians, metrics) -> np.ndarray:
    Js = _stacked_layer_jacobians(jacobians)
    n = jacobians[0].shape[0]
    H = np.zeros((Js[0].shape[0],) * 2)
    for J, m in zip(Js, metrics):
        if J.shape[1]:
            H += J @ woodbury_apply_inverse(m, J.T)
    H /= n
    return 0.5 * (H + H.T)


def ntk_matrix(graph, params: ParameterState, dataset, config: OptimizerConfig) -> np.ndarray:
    """Generalized NTK ``H = (1/n) dybar/dtheta G^{-1} dybar/dtheta^T``, shape ``(n p, n p)``.

    ``G`` is the block-diagonal layerwise metric built on the dataset inputs;
    its inverse is applied per layer through the Woodbury identity.
    """
    X = np.atleast_2d(np.asarray(dataset[0] if isinstance(dataset, tuple) else dataset, dtype=np.float64))
    if X.shape[0] * graph.output_dim > 512:
        raise DimensionMismatch("n * p exceeds 512; the kernel is meant for small dense checks")
    Y, tape = forward(graph, params, X)
    jac = [j.matrix for j in layer_jacobians(tape)]
    metrics = layer_metrics(graph, params, X, config, tape=tape, Y=Y)
    return _kernel(jac, metrics)


def _per_sample_spectral_norms(jacobians) -> np.ndarray:
    J = np.concatenate(jacobians, axis=-1)
    if J.shape[1] == 1:
        return np.linalg.norm(J[:, 0, :], axis=-1)
    return np.linalg.norm(J, ord=2, axis=(1, 2))


@dataclass
class RunArtifacts:
    """Per-step measurements of a paired run (primed quantities are for ``S'``)."""

    n: int
    masses: list
    eta: float
    times: list = field(default_factory=list)
    divergence: list = field(default_factory=list)
    disturbance_max: list = field(default_factory=list)
    disturbance_stacked: list = field(default_factory=list)
    jacobian_norm: list = field(default_factory=list)
    residual_norm: list = field(default_factory=list)
    xi_times: list = field(default_factory=list)
    xi_samples: list = field(default_factory=list)
    final_params: tuple = ()

    @property
    def mu(self) -> float:
        return float(min(np.min(m) for m in self.masses if np.size(m)))


def estimate_constants(artifacts: RunArtifacts) -> StabilityConstants:
    """Empirical constants over every recorded step of both runs."""
    xi = float(np.min(artifacts.xi_samples))
    if xi <= RANK_TOL:
        raise RankDeficient(f"smallest kernel eigenvalue {xi:.3e} <= {RANK_TOL:.0e}: Jacobian lost full column rank")
    return StabilityConstants(
        kappa=float(np.max(artifacts.jacobian_norm)),
        lipschitz=float(np.max(artifacts.residual_norm)),
        xi=xi,
        mu=artifacts.mu,
        n=artifacts.n,
    )


@dataclass(frozen=True)
class DisturbanceCheck:
    passed: bool
    individual_margin: float
    stacked_margin: float
    worst_step: int


def disturbance_bound_check(artifacts: RunArtifacts, constants: StabilityConstants) -> DisturbanceCheck:
    """Check ``|d_i| <= 2 kappa^2 L/(n mu)`` and ``|dbar| <= 2 kappa^2 L/(sqrt(n) mu)`` at every step.

    Margins are ``bound - worst observed``; negative means violated.
    """
    dmax = np.asarray(artifacts.disturbance_max, dtype=float)
    dstk = np.asarray(artifacts.disturbance_stacked, dtype=float)
    if dmax.size == 0:
        return DisturbanceCheck(True, constants.disturbance_bound, constants.stacked_disturbance_bound, -1)
    ind = constants.disturbance_bound - dmax.max()
    stk = constants.stacked_disturbance_bound - dstk.max()
    worst = int(np.argmax(dmax / constants.disturbance_bound))
    return DisturbanceCheck(bool(ind >= 0 and stk >= 0), float(ind), float(stk), worst)


@dataclass
class StabilityReport:
    constants: StabilityConstants
    bound: float
    observed_divergence: float
    horizon: float
    t_end: float
    eta: float
    steps: int
    disturbance: DisturbanceCheck
    eta_precondition_ok: bool
    artifacts: RunArtifacts = field(repr=False)

    @property
    def holds(self) -> bool:
        return self.observed_divergence <= self.bound

    @property
    def margin(self) -> float:
        """``bound / observed``; infinite when nothing diverged."""
        if self.observed_divergence == 0:
            return float("inf")
        return self.bound / self.observed_divergence

    def lines(self) -> list[str]:
        c = self.constants
        return [
            f"n = {c.n}",
            f"kappa = {c.kappa!r}",
            f"lipschitz_loss = {c.lipschitz!r}",
            f"xi = {c.xi!r}",
            f"mu = {c.mu!r}",
            "constants_domain = realized trajectories of both runs (all recorded steps, inputs of S and S')",
            f"eta = {self.eta!r}",
            f"eta_precondition_ok = {self.eta_precondition_ok}",
            f"steps = {self.steps}",
            f"transient_horizon = {self.horizon!r}",
            f"t_end = {self.t_end!r}",
            f"bound = {self.bound!r}",
            f"observed_divergence = {self.observed_divergence!r}",
            f"bound_over_observed = {self.margin!r}",
            f"bound_holds = {self.holds}",
            f"disturbance_bound = {c.disturbance_bound!r}",
            f"stacked_disturbance_bound = {c.stacked_disturbance_bound!r}",
            f"max_disturbance = {max(self.artifacts.disturbance_max, default=0.0)!r}",
            f"max_stacked_disturbance = {max(self.artifacts.disturbance_stacked, default=0.0)!r}",
            f"disturbance_individual_margin = {self.disturbance.individual_margin!r}",
            f"disturbance_stacked_margin = {self.disturbance.stacked_margin!r}",
            f"disturbance_bounds_hold = {self.disturbance.passed}",
        ]

    def divergence_rows(self):
        a = self.artifacts
        return zip(a.times, a.divergence, a.disturbance_max, a.disturbance_stacked)


class _Run:
    """One gradient-flow trajectory on its own dataset, optionally probing the base inputs."""

    def __init__(self, graph, params, X, T, config, probe=None):
        self.graph = graph
        self.params = params
        self.X = X
        self.T = T
        self.config = config
        self.masses = mass_vectors(graph.block_sizes, config.masses)
        self.probe = probe  # (index, x, target) of the base sample this run replaced

    def linearize(self):
        n = self.X.shape[0]
        X = self.X if self.probe is None else np.vstack([self.X, self.probe[1][None, :]])
        Y, tape = forward(self.graph, self.params, X)
        jac = [j.matrix for j in layer_jacobians(tape)]
        run_jac = [J[:n] for J in jac]
        if self.config.pullback:
            metrics = assemble_layer_metrics(
                run_jac, Y[:n], self.masses, self.config.output_metric, self.config.epsilon,
                batch_cap=self.config.metric_batch_cap, diagonal=self.config.output_diagonal,
            )
        else:
            metrics = [LayerMetric(a, d, np.zeros((1, d.size))) for a, d in enumerate(self.masses)]
        self.Y, self.jac, self.run_jac, self.metrics = Y, jac, run_jac, metrics
        R = Y[:n] - self.T
        if not np.all(np.isfinite(R)):
            raise NonFinite("outputs became non-finite")
        self.R = R
        return self

    def base_outputs(self) -> np.ndarray:
        n = self.X.shape[0]
        Y = self.Y[:n].copy()
        if self.probe is not None:
            Y[self.probe[0]] = self.Y[n]
        return Y

    def base_jacobians(self) -> list[np.ndarray]:
        if self.probe is None:
            return self.run_jac
        n = self.X.shape[0]
        out = []
        for J in self.jac:
            Jb = J[:n].copy()
            Jb[self.probe[0]] = J[n]
            out.append(Jb)
        return out

    def jacobian_norms(self) -> np.ndarray:
        return _per_sample_spectral_norms(self.jac)

    def residual_norms(self) -> np.ndarray:
        R = self.R
        if self.probe is not None:
            R = np.vstack([R, self.Y[-1:] - self.probe[2][None, :]])
        return np.linalg.norm(R, axis=1)

    def disturbance(self) -> np.ndarray:
        """``d_i = (1/n) dF(x_i)^T G^{-1} [grad l(x_k, yhat_k) - grad l(x'_k, yhat'_k)]`` on base inputs."""
        n = self.X.shape[0]
        k = self.probe[0]
        r_base = self.Y[n] - self.probe[2]
        r_repl = self.R[k]
        base_jac = self.base_jacobians()
        d = np.zeros((n, self.graph.output_dim))
        for J, Jb, m in zip(self.jac, base_jac, self.metrics):
            if J.shape[-1] == 0:
                continue
            diff = J[n].T @ r_base - J[k].T @ r_repl
            u = woodbury_apply_inverse(m, diff)
            d += Jb @ u
        return d / n

    def kernel_min_eigenvalue(self) -> float:
        return min_eigenvalue(_kernel(self.run_jac, self.metrics))

    def step(self, eta):
        n = self.X.shape[0]
        new = []
        for J, m, w in zip(self.run_jac, self.metrics, self.params.blocks):
            if J.shape[-1] == 0:
                new.append(w)
                continue
            g = np.einsum("bon,bo->n", J, self.R) / n
            new.append(w - eta * woodbury_apply_inverse(m, g))
        self.params = ParameterState(tuple(new))


def default_eta(graph, params, paired: PairedDatasets, config: OptimizerConfig, factor: float = 8e-4) -> float:
    """``factor * mu / kappa0^2`` with ``kappa0`` measured at initialization on both datasets."""
    X = np.vstack([paired.inputs, paired.replacement_input[None, :]])
    _, tape = forward(graph, params, X)
    kappa0 = float(np.max(_per_sample_spectral_norms([j.matrix for j in layer_jacobians(tape)])))
    mu = min(float(np.min(m)) for m in mass_vectors(graph.block_sizes, config.masses) if m.size)
    return factor * mu / kappa0 ** 2


def paired_training(
    graph,
    params: ParameterState,
    paired: PairedDatasets,
    config: OptimizerConfig,
    *,
    eta: float | None = None,
    xi_every: int = 10,
    horizon_factor: float = 5.0,
    tail_factor: float = 1.05,
    horizon: float | None = None,
    t_end: float | None = None,
    max_steps: int = 2_000_000,
) -> StabilityReport:
    """Run both trajectories in lockstep and report the stability bound.

    Without an explicit ``horizon`` the run continues until the flow time
    exceeds ``tail_factor * horizon_factor / xi`` where ``xi`` is the running
    minimum of the kernel eigenvalue; divergence is measured for
    ``t >= horizon_factor / xi``. Passing ``horizon`` and ``t_end`` pins the
    window (used when comparing step sizes).
    """
    if config.loss != "mse":
        raise ValueError("the stability experiment uses the mean squared loss")
    eta = default_eta(graph, params, paired, config) if eta is None else float(eta)
    X, T = paired.base()
    Xp, Tp = paired.replaced()
    k = paired.index
    run = _Run(graph, params, X, T, config)
    run_p = _Run(graph, params, Xp, Tp, config, probe=(k, X[k], T[k]))
    art = RunArtifacts(paired.n, run.masses, eta)
    xi_min = np.inf
    step = 0
    while True:
        run.linearize()
        run_p.linearize()
        t = step * eta
        art.times.append(t)
        art.divergence.append(float(np.max(np.linalg.norm(run.base_outputs() - run_p.base_outputs(), axis=1))))
        d = run_p.disturbance()
        art.disturbance_max.append(float(np.max(np.linalg.norm(d, axis=1))))
        art.disturbance_stacked.append(float(np.linalg.norm(d)))
        art.jacobian_norm.append(float(max(run.jacobian_norms().max(), run_p.jacobian_norms().max())))
        art.residual_norm.append(float(max(run.residual_norms().max(), run_p.residual_norms().max())))
        if step % xi_every == 0:
            xi_now = min(run.kernel_min_eigenvalue(), run_p.kernel_min_eigenvalue())
            art.xi_times.append(t)
            art.xi_samples.append(xi_now)
            if xi_now <= RANK_TOL:
                raise RankDeficient(f"kernel eigenvalue {xi_now:.3e} at t={t:.4g}: full-rank hypothesis violated")
            xi_min = min(xi_min, xi_now)
        end = t_end if t_end is not None else tail_factor * horizon_factor / xi_min
        if t >= end and step % xi_every == 0:
            break
        if step >= max_steps:
            raise RuntimeError(f"no convergence of the transient horizon within {max_steps} steps")
        run.step(eta)
        run_p.step(eta)
        step += 1
    art.final_params = (run.params, run_p.params)
    constants = estimate_constants(art)
    window_start = horizon if horizon is not None else horizon_factor / constants.xi
    times = np.asarray(art.times)
    late = np.asarray(art.divergence)[times >= window_start]
    observed = float(late.max()) if late.size else float("nan")
    return StabilityReport(
        constants=constants,
        bound=constants.bound,
        observed_divergence=observed,
        horizon=float(window_start),
        t_end=float(times[-1]),
        eta=eta,
        steps=step,
        disturbance=disturbance_bound_check(art, constants),
        eta_precondition_ok=bool(eta <= 1e-3 * constants.mu / constants.kappa ** 2),
        artifacts=art,
    )
