import numpy as np
import pytest

from layerwise.errors import DimensionMismatch, RankDeficient
from layerwise.metric import block_diagonal_dense
from layerwise.modules import Linear, ParameterState, forward, init_params, layer_jacobians, mlp
from layerwise.optimizer import OptimizerConfig, layer_metrics
from layerwise.stability import (
    PairedDatasets,
    RunArtifacts,
    StabilityConstants,
    default_eta,
    disturbance_bound_check,
    estimate_constants,
    ntk_matrix,
    paired_training,
    stability_bound,
    teacher_dataset,
)


def linear_pair(rng, n=4, d=6, mass=1.0):
    lin = Linear(d, 1)
    p = ParameterState((0.3 * rng.normal(size=d),))
    X = rng.normal(size=(n, d))
    T = rng.normal(size=(n, 1))
    paired = PairedDatasets(X, T, 1, rng.normal(size=d), rng.normal(size=1))
    return lin, p, paired, OptimizerConfig(learning_rate=0.1, masses=mass)


def test_kernel_scalar_example():
    x = np.array([[1.0], [2.0], [-0.5]])
    H = ntk_matrix(Linear(1, 1), ParameterState((np.array([0.7]),)), (x,), OptimizerConfig(pullback=False))
    np.testing.assert_allclose(H, x @ x.T / 3, rtol=1e-15)


def test_kernel_matches_dense_inverse(rng):
    g = mlp([3, 5, 2], "tanh", bias=True)
    p = init_params(g, 4)
    X = rng.normal(size=(4, 3))
    cfg = OptimizerConfig(masses=[0.5, 2.0, 1.0, 1.5, 0.7], output_metric="gauss_newton")
    H = ntk_matrix(g, p, (X,), cfg)
    _, tape = forward(g, p, X)
    J = np.concatenate([j.matrix for j in layer_jacobians(tape)], axis=-1).reshape(8, -1)
    G = block_diagonal_dense(layer_metrics(g, p, X, cfg))
    dense = J @ np.linalg.solve(G, J.T) / 4
    assert np.max(np.abs(H - dense)) <= 1e-8 * np.max(np.abs(dense))
    assert np.all(np.linalg.eigvalsh(H) > 0)


def test_kernel_singular_when_outputs_exceed_parameters(rng):
    lin = Linear(2, 1)
    X = rng.normal(size=(3, 2))
    H = ntk_matrix(lin, ParameterState((np.ones(2),)), (X,), OptimizerConfig())
    assert abs(np.linalg.eigvalsh(H)[0]) <= 1e-12
    paired = PairedDatasets(X, np.zeros((3, 1)), 0, np.ones(2), np.zeros(1))
    with pytest.raises(RankDeficient):
        paired_training(lin, ParameterState((np.ones(2),)), paired, OptimizerConfig(), t_end=0.01, horizon=0.0)


def test_kernel_size_limit():
    with pytest.raises(DimensionMismatch):
        ntk_matrix(Linear(2, 2), ParameterState((np.zeros(4),)), (np.zeros((257, 2)),), OptimizerConfig())


def test_bound_formula_scaling():
    b = stability_bound(2.0, 3.0, 0.5, 16, 0.25)
    assert b == pytest.approx(2 * 4 * 3 / (0.5 * 4 * 0.25))
    assert stability_bound(2.0, 3.0, 0.5, 32, 0.25) == pytest.approx(b / np.sqrt(2))
    c = StabilityConstants(kappa=2.0, lipschitz=3.0, xi=0.5, mu=0.25, n=16)
    assert c.bound == b
    assert c.disturbance_bound == pytest.approx(2 * 4 * 3 / (16 * 0.25))
    assert c.stacked_disturbance_bound == pytest.approx(c.disturbance_bound * 4)


def test_constants_for_linear_model(rng):
    lin, p, paired, cfg = linear_pair(rng, mass=0.3)
    rep = paired_training(lin, p, paired, cfg, eta=1e-3, t_end=0.02, horizon=0.0, xi_every=1)
    norms = np.linalg.norm(np.vstack([paired.inputs, paired.replacement_input]), axis=1)
    assert rep.constants.kappa == pytest.approx(norms.max(), rel=1e-14)
    assert rep.constants.mu == 0.3
    assert rep.steps == 20


def test_xi_single_parameter_single_sample():
    x, mu = 1.7, 0.4
    lin = Linear(1, 1)
    paired = PairedDatasets([[x]], [[0.0]], 0, [x], [0.5])
    rep = paired_training(lin, ParameterState((np.array([0.2]),)), paired,
                          OptimizerConfig(masses=mu), eta=1e-3, t_end=0.0, horizon=0.0)
    assert rep.constants.xi == pytest.approx(x * x / (mu + x * x), rel=1e-13)


def test_null_replacement_is_bitwise_identical():
    g = mlp([8, 3, 1], "tanh")
    p = init_params(g, 1)
    paired = teacher_dataset(g, p, 4, seed=5, null_replacement=True)
    rep = paired_training(g, p, paired, OptimizerConfig(masses=0.1), eta=1e-2, t_end=0.5, horizon=0.0)
    assert rep.observed_divergence == 0.0
    assert max(rep.artifacts.divergence) == 0.0
    a, b = rep.artifacts.final_params
    assert all(np.array_equal(x, y) for x, y in zip(a.blocks, b.blocks))
    assert rep.margin == float("inf")


def test_step_zero_disturbance_linear(rng):
    lin, p, paired, cfg = linear_pair(rng, mass=0.5)
    rep = paired_training(lin, p, paired, cfg, eta=1e-3, t_end=0.0, horizon=0.0)
    w = p.blocks[0]
    X, T = paired.base()
    Xp, Tp = paired.replaced()
    n, k = paired.n, paired.index
    G = 0.5 * np.eye(X.shape[1]) + Xp.T @ Xp / n
    v = X[k] * (X[k] @ w - T[k, 0]) - Xp[k] * (Xp[k] @ w - Tp[k, 0])
    d = X @ np.linalg.solve(G, v) / n
    assert abs(rep.artifacts.disturbance_max[0] - np.abs(d).max()) <= 1e-12
    assert abs(rep.artifacts.disturbance_stacked[0] - np.linalg.norm(d)) <= 1e-12
    assert rep.artifacts.divergence[0] == 0.0


def test_disturbance_check_cases():
    c = StabilityConstants(kappa=1.0, lipschitz=1.0, xi=1.0, mu=1.0, n=4)
    art = RunArtifacts(4, [np.ones(2)], 0.1)
    assert disturbance_bound_check(art, c).passed
    art.disturbance_max += [0.1, 0.4]
    art.disturbance_stacked += [0.2, 0.5]
    chk = disturbance_bound_check(art, c)
    assert chk.passed and chk.individual_margin == pytest.approx(0.1) and chk.worst_step == 1
    art.disturbance_stacked.append(1.5)
    art.disturbance_max.append(0.0)
    assert not disturbance_bound_check(art, c).passed


def test_estimate_constants_rejects_rank_loss():
    art = RunArtifacts(2, [np.ones(1)], 0.1, jacobian_norm=[1.0], residual_norm=[1.0], xi_samples=[0.0])
    with pytest.raises(RankDeficient):
        estimate_constants(art)


def test_mass_scaling_of_inverse_metric(rng):
    lin, p, paired, _ = linear_pair(rng)
    X = paired.inputs
    v = rng.normal(size=X.shape[1])
    norms = []
    for mu in (0.1, 0.2, 0.4, 0.8):
        G = block_diagonal_dense(layer_metrics(lin, p, X, OptimizerConfig(masses=mu)))
        norms.append(np.linalg.norm(np.linalg.solve(G, v)))
        assert norms[-1] <= np.linalg.norm(v) / mu
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_bound_holds_on_small_teacher_problem():
    g = mlp([12, 4, 1], "tanh")
    p = init_params(g, 3)
    paired = teacher_dataset(g, p, 6, seed=2)
    cfg = OptimizerConfig(masses=0.1)
    eta = default_eta(g, p, paired, cfg, factor=5e-2)
    rep = paired_training(g, p, paired, cfg, eta=eta, t_end=2.0, horizon=1.0, xi_every=5)
    assert rep.holds and rep.disturbance.passed
    assert rep.observed_divergence > 0
    text = "\n".join(rep.lines())
    for key in ("kappa = ", "xi = ", "bound_holds = True", "disturbance_bounds_hold = True"):
        assert key in text
    rows = list(rep.divergence_rows())
    assert len(rows) == rep.steps + 1 and rows[0][0] == 0.0


def test_teacher_dataset_properties():
    g = mlp([10, 3, 1], "tanh")
    p = init_params(g, 0)
    paired = teacher_dataset(g, p, 5, seed=1, scale=0.05)
    Xall = np.vstack([paired.inputs, paired.replacement_input])
    np.testing.assert_allclose(Xall @ Xall.T, np.eye(6), atol=1e-14)
    y0, _ = forward(g, p, paired.inputs)
    assert np.max(np.abs(paired.targets - y0)) <= 0.05
    again = teacher_dataset(g, p, 5, seed=1, scale=0.05)
    assert np.array_equal(again.inputs, paired.inputs)
    with pytest.raises(DimensionMismatch):
        teacher_dataset(g, p, 10, seed=1)
    with pytest.raises(DimensionMismatch):
        PairedDatasets(np.zeros((2, 2)), np.zeros(2), 2, np.zeros(2), np.zeros(1))
    assert paired.with_n(3).n == 3


def test_rejects_non_mse_loss(rng):
    lin, p, paired, _ = linear_pair(rng)
    with pytest.raises(ValueError):
        paired_training(lin, p, paired, OptimizerConfig(loss="softmax_ce"), t_end=0.0)
