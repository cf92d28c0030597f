"""Grid interpolation, backup operators, and fixed-point solving.

Reference implementations here are deliberately slow and dumb: np.interp /
RegularGridInterpolator plus explicit python loops, so any agreement with the
vectorized/numba paths is meaningful.
"""
import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from residual_rl.envs import Synthetic1D, dataset_with_n_transitions
from residual_rl.errors import ConfigError
from residual_rl.gridsolve import (
    CONSISTENCY_HEADER,
    ConsistencyRow,
    Grid,
    GridOperator,
    GridQ,
    QuadratureSource,
    consistency_curve,
    estimate_lipschitz,
    kernel_coupling,
    solve_fixed_point,
    solve_true_fixed_point,
    write_consistency_csv,
)
from residual_rl.mdp import ActionSet, DiscountedProblem, StateSpace, sup_norm_distance
from residual_rl.nets import LinearModel
from residual_rl.residuals import (
    EmpiricalKernel,
    ResidualSet,
    TransitionModel,
    compute_residuals,
    fit_transition_model,
)


def _problem_1d(cost, gamma=0.9, lo=-2.0, hi=2.0, n_act=2):
    space = StateSpace(lower=np.array([lo]), upper=np.array([hi]))
    acts = ActionSet(labels=tuple(str(i) for i in range(n_act)),
                     payloads=np.zeros((n_act, 1)))
    return DiscountedProblem(space=space, actions=acts, cost=cost, gamma=gamma)


def _kernel_1d(slope, residuals, space, n_act=2):
    # prediction slope*s regardless of action
    w = np.zeros((1 + n_act, 1))
    w[0, 0] = slope
    model = TransitionModel(LinearModel(W=w, b=np.zeros(1)), 1, n_act)
    return EmpiricalKernel(model, ResidualSet(np.asarray(residuals, float).reshape(-1, 1), "t"), space)


# ------------------------------------------------------------ grid basics

def test_grid_validation():
    with pytest.raises(ConfigError):
        Grid((np.array([0.0, 1.0, 3.0]),))        # nonuniform
    with pytest.raises(ConfigError):
        Grid((np.array([0.0]),))                  # single node
    with pytest.raises(ConfigError):
        Grid((np.linspace(0, 1, 4),) * 3)         # 3-d unsupported
    g = Grid.from_space(StateSpace(np.array([-1.0]), np.array([1.0])), 5)
    assert g.shape == (5,) and g.n_nodes == 5
    assert np.allclose(g.axes[0], np.linspace(-1, 1, 5))
    assert g.steps[0] == pytest.approx(0.5)


def test_grid_points_c_order():
    g = Grid((np.array([0.0, 1.0]), np.array([10.0, 11.0, 12.0])))
    pts = g.points()
    assert pts.shape == (6, 2)
    assert np.array_equal(pts[:3, 0], np.zeros(3))       # second axis fastest
    assert np.array_equal(pts[:3, 1], np.array([10.0, 11.0, 12.0]))


def test_locate_clamps_out_of_range():
    g = Grid((np.linspace(0.0, 1.0, 5),))
    idx, frac = g.locate(np.array([[-3.0], [0.3], [9.0]]))
    assert idx[0].tolist() == [0, 1, 3]
    assert frac[0][0] == 0.0 and frac[0][2] == 1.0
    assert frac[0][1] == pytest.approx(0.2, abs=1e-12)


def test_gridq_1d_matches_np_interp():
    g = Grid((np.linspace(-2.0, 2.0, 17),))
    rng = np.random.default_rng(0)
    q = GridQ(g, rng.normal(size=(17, 3)))
    s = rng.uniform(-2.5, 2.5, size=(200, 1))            # includes clamped points
    got = q.eval_batch(s)
    sc = np.clip(s[:, 0], -2.0, 2.0)
    for a in range(3):
        ref = np.interp(sc, g.axes[0], q.values[:, a])
        assert np.allclose(got[:, a], ref, atol=1e-12)
    assert q.eval(np.array([0.33]), 1) == pytest.approx(
        np.interp(0.33, g.axes[0], q.values[:, 1]), abs=1e-12)


def test_gridq_2d_matches_scipy():
    g = Grid((np.linspace(-1.0, 1.0, 9), np.linspace(0.0, 4.0, 7)))
    rng = np.random.default_rng(1)
    q = GridQ(g, rng.normal(size=(9, 7, 2)))
    s = np.column_stack([rng.uniform(-1.4, 1.4, 300), rng.uniform(-1.0, 5.0, 300)])
    got = q.eval_batch(s)
    sc = np.column_stack([np.clip(s[:, 0], -1.0, 1.0), np.clip(s[:, 1], 0.0, 4.0)])
    for a in range(2):
        ref = RegularGridInterpolator(g.axes, q.values[..., a])(sc)
        assert np.allclose(got[:, a], ref, atol=1e-12)


def test_gridq_shape_mismatch():
    g = Grid((np.linspace(0, 1, 4),))
    with pytest.raises(ValueError):
        GridQ(g, np.zeros((5, 2)))


# ------------------------------------------------------------ quadrature

def test_quadrature_weights_and_moments():
    src = QuadratureSource(f=None, sigma=0.3, n_points=21)
    off, w = src.offsets_and_weights(1)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    # Gauss-Hermite integrates N(0, sigma^2) moments exactly
    assert float(w @ off[:, 0]) == pytest.approx(0.0, abs=1e-12)
    assert float(w @ off[:, 0] ** 2) == pytest.approx(0.09, abs=1e-12)
    assert float(w @ off[:, 0] ** 4) == pytest.approx(3 * 0.3 ** 4, abs=1e-12)


def test_quadrature_2d_tensor_product():
    src = QuadratureSource(f=None, sigma=0.5, n_points=8)
    off, w = src.offsets_and_weights(2)
    assert off.shape == (64, 2) and w.shape == (64,)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert float(w @ (off[:, 0] * off[:, 1])) == pytest.approx(0.0, abs=1e-12)  # independence
    assert float(w @ off[:, 1] ** 2) == pytest.approx(0.25, abs=1e-12)


def test_quadrature_matches_monte_carlo():
    src = QuadratureSource(f=None, sigma=0.4, n_points=40)
    off, w = src.offsets_and_weights(1)
    g = lambda x: np.cos(1.3 * x) + 0.1 * x ** 3
    quad = float(w @ g(off[:, 0]))
    draws = np.random.default_rng(7).normal(0.0, 0.4, size=2_000_000)
    mc = float(g(draws).mean())
    assert quad == pytest.approx(mc, abs=2e-3)


# ------------------------------------------------------------ operator

def test_selfloop_fixed_point_is_cost_over_one_minus_gamma():
    # f(s,a)=s with a single zero residual: backup is c(s,a) + gamma*minQ(s)
    gamma = 0.9
    prob = _problem_1d(lambda s, a: float(s[0] ** 2 + 0.5 * a), gamma=gamma)
    kern = _kernel_1d(1.0, [0.0], prob.space)
    grid = Grid.from_space(prob.space, 41)
    q, diag = solve_fixed_point(prob, grid, kern, tol=1e-12)
    nodes = grid.points()[:, 0]
    # min over actions is a=0, so Q(s,0)=s^2/(1-gamma), Q(s,1)=s^2/(1-gamma)+0.5
    assert np.allclose(q.values[:, 0], nodes ** 2 / (1 - gamma), atol=1e-9)
    assert np.allclose(q.values[:, 1] - q.values[:, 0], 0.5, atol=1e-9)
    assert diag.converged


def _reference_sweep(q: GridQ, problem, kernel, grid):
    """Straight-loop scenario backup via np.interp, no shared code."""
    nodes = grid.points()
    n_act = len(problem.actions)
    out = np.empty((nodes.shape[0], n_act))
    for j, s in enumerate(nodes):
        for a in range(n_act):
            atoms = kernel.support(s, a)
            vals = []
            for atom in atoms:
                per_action = [np.interp(atom[0], grid.axes[0], q.values[:, ap])
                              for ap in range(n_act)]
                vals.append(min(per_action))
            out[j, a] = problem.cost(s, a) + problem.gamma * np.mean(vals)
    return out


def test_operator_matches_reference_sweep():
    env = Synthetic1D(noise_std=0.1)
    prob = env.make_problem(0.9)
    ds = dataset_with_n_transitions(env, 60, seed=4)
    model = fit_transition_model(ds, kind="linear")
    kern = EmpiricalKernel(model, compute_residuals(model, ds), env.space)
    grid = Grid.from_space(env.space, 31)
    op = GridOperator(prob, grid, kern)
    rng = np.random.default_rng(5)
    q = GridQ(grid, rng.normal(size=(31, len(env.actions))))
    got = op(q).values
    ref = _reference_sweep(q, prob, kern, grid)
    assert np.max(np.abs(got - ref)) < 1e-10


def test_operator_is_gamma_contraction_on_random_pairs():
    env = Synthetic1D(noise_std=0.1)
    prob = env.make_problem(0.9)
    ds = dataset_with_n_transitions(env, 50, seed=6)
    model = fit_transition_model(ds, kind="linear")
    kern = EmpiricalKernel(model, compute_residuals(model, ds), env.space)
    grid = Grid.from_space(env.space, 101)
    op = GridOperator(prob, grid, kern)
    rng = np.random.default_rng(8)
    for _ in range(25):
        qa = GridQ(grid, rng.uniform(-5, 5, (101, 3)))
        qb = GridQ(grid, rng.uniform(-5, 5, (101, 3)))
        num = np.max(np.abs(op(qa).values - op(qb).values))
        den = np.max(np.abs(qa.values - qb.values))
        assert num <= 0.9 * den + 1e-9


def test_operator_rejects_foreign_grid():
    env = Synthetic1D(noise_std=0.1)
    prob = env.make_problem(0.9)
    grid = Grid.from_space(env.space, 11)
    other = Grid.from_space(env.space, 11)
    op = GridOperator(prob, grid, QuadratureSource(env.f_star, 0.1, 8))
    with pytest.raises(ConfigError):
        op(GridQ.zeros(other, len(env.actions)))


def test_2d_operator_matches_reference():
    space = StateSpace(lower=np.array([-1.0, -1.0]), upper=np.array([1.0, 1.0]))
    acts = ActionSet(labels=("l", "r"), payloads=np.array([[-1.0], [1.0]]))
    prob = DiscountedProblem(
        space=space, actions=acts,
        cost=lambda s, a: float(s[0] ** 2 + 0.3 * s[1] ** 2 + 0.05 * a),
        gamma=0.85)
    f = lambda s, a: np.array([0.7 * s[0] + 0.1 * (a * 2 - 1), 0.5 * s[1]])
    src = QuadratureSource(f, sigma=0.2, n_points=5)
    grid = Grid.from_space(space, (7, 9))
    op = GridOperator(prob, grid, src)
    rng = np.random.default_rng(13)
    q = GridQ(grid, rng.normal(size=(7, 9, 2)))
    got = op(q).values.reshape(-1, 2)

    offsets, weights = src.offsets_and_weights(2)
    interps = [RegularGridInterpolator(grid.axes, q.values[..., a]) for a in range(2)]
    nodes = grid.points()
    ref = np.empty_like(got)
    for j, s in enumerate(nodes):
        for a in range(2):
            atoms = space.clip(f(s, a)[None, :] + offsets)
            best = np.minimum(interps[0](atoms), interps[1](atoms))
            ref[j, a] = prob.cost(s, a) + prob.gamma * float(weights @ best)
    assert np.max(np.abs(got - ref)) < 1e-10


def test_2d_solve_converges_and_contracts():
    space = StateSpace(lower=np.array([-1.0, -1.0]), upper=np.array([1.0, 1.0]))
    acts = ActionSet(labels=("a",), payloads=np.zeros((1, 1)))
    prob = DiscountedProblem(space=space, actions=acts,
                             cost=lambda s, a: float(abs(s[0]) + abs(s[1])),
                             gamma=0.8)
    f = lambda s, a: 0.6 * np.asarray(s)
    grid = Grid.from_space(space, (11, 11))
    q, diag = solve_fixed_point(prob, grid, QuadratureSource(f, 0.15, 7), tol=1e-10)
    assert diag.converged
    d = diag.deltas
    assert np.all(d[1:] <= 0.8 * d[:-1] + 1e-10)
    # fixed point of a monotone operator with positive cost is positive
    assert q.values.min() >= 0.0


def test_zero_discount_returns_costs():
    prob = _problem_1d(lambda s, a: float(3.0 * s[0] + a), gamma=0.0)
    grid = Grid.from_space(prob.space, 9)
    op = GridOperator(prob, grid, _kernel_1d(0.5, [0.1, -0.4], prob.space))
    q = GridQ(grid, np.random.default_rng(2).normal(size=(9, 2)))
    out = op(q).values
    nodes = grid.points()
    for j in range(9):
        for a in range(2):
            assert out[j, a] == pytest.approx(3.0 * nodes[j, 0] + a, abs=1e-12)


def test_selfloop_unit_cost_single_application_and_solve():
    prob = _problem_1d(lambda s, a: 1.0, gamma=0.5)
    grid = Grid.from_space(prob.space, 15)
    kern = _kernel_1d(1.0, [0.0], prob.space)
    out = GridOperator(prob, grid, kern)(GridQ.zeros(grid, 2))
    assert np.allclose(out.values, 1.0, atol=1e-14)
    prob9 = _problem_1d(lambda s, a: 1.0, gamma=0.9)
    q, _ = solve_fixed_point(prob9, grid, _kernel_1d(1.0, [0.0], prob9.space), tol=1e-12)
    assert np.allclose(q.values, 10.0, atol=1e-9)


def test_sup_norm_distance_grid_fast_path_is_exhaustive_max():
    grid = Grid.from_space(StateSpace(np.array([-1.0]), np.array([1.0])), 11)
    rng = np.random.default_rng(21)
    q1 = GridQ(grid, rng.normal(size=(11, 3)))
    q2 = GridQ(grid, rng.normal(size=(11, 3)))
    brute = max(abs(q1.values[j, a] - q2.values[j, a])
                for j in range(11) for a in range(3))
    assert sup_norm_distance(q1, q2) == pytest.approx(brute, abs=0.0)
    assert sup_norm_distance(q1, q1) == 0.0
    q3 = GridQ(grid, q1.values + 3.0)
    assert sup_norm_distance(q1, q3) == pytest.approx(3.0, abs=1e-15)


def _exact_synthetic_model(env):
    # features [s, onehot(left, stay, right)] reproduce f_star exactly
    w = np.array([[env.decay]] + [[p] for p in env.actions.payloads[:, 0]])
    return TransitionModel(LinearModel(W=w, b=np.zeros(1)), 1, len(env.actions))


def test_zero_residual_exact_model_collapses_to_deterministic_solve():
    env = Synthetic1D(noise_std=0.1)
    prob = env.make_problem(0.9)
    grid = Grid.from_space(env.space, 51)
    zero = ResidualSet(np.zeros((1, 1)), "zero")
    k_model = EmpiricalKernel(_exact_synthetic_model(env), zero, env.space)
    from residual_rl.residuals import full_information_kernel
    k_det = full_information_kernel(env.f_star, np.zeros((1, 1)), env.space)
    q_a, _ = solve_fixed_point(prob, grid, k_model, tol=1e-11)
    q_b, _ = solve_fixed_point(prob, grid, k_det, tol=1e-11)
    assert np.max(np.abs(q_a.values - q_b.values)) < 1e-12


def test_exact_model_with_true_noise_matches_full_information_kernel():
    # injecting f_hat = f_star and the realized noise makes the two fixed
    # points coincide exactly
    env = Synthetic1D(noise_std=0.1)
    prob = env.make_problem(0.9)
    grid = Grid.from_space(env.space, 51)
    ds = dataset_with_n_transitions(env, 40, seed=12)
    from residual_rl.residuals import full_information_kernel, true_noise_residuals
    eps = true_noise_residuals(env, ds)
    k_inj = EmpiricalKernel(_exact_synthetic_model(env),
                            ResidualSet(eps, "true"), env.space)
    k_full = full_information_kernel(env.f_star, eps, env.space)
    q_a, _ = solve_fixed_point(prob, grid, k_inj, tol=1e-11)
    q_b, _ = solve_fixed_point(prob, grid, k_full, tol=1e-11)
    assert np.max(np.abs(q_a.values - q_b.values)) < 1e-12


def test_quadrature_operator_matches_monte_carlo():
    # the comparison needs a Q at the smoothness scale the solver actually
    # produces; on jagged random tables neither rule resolves the kinks
    env = Synthetic1D(noise_std=0.1)
    prob = env.make_problem(0.9)
    grid = Grid.from_space(env.space, 41)
    q, _ = solve_true_fixed_point(env, 0.9, grid, tol=1e-10, gh_nodes=64)
    op = GridOperator(prob, grid, QuadratureSource(env.f_star, env.noise_std, 64))
    got = op(q).values
    draws = np.random.default_rng(3).normal(0.0, env.noise_std, size=1_000_000)
    lo, hi = env.space.lower[0], env.space.upper[0]
    nodes = grid.points()
    for j in range(41):
        s = nodes[j]
        for a in range(3):
            nxt = np.clip(env.f_star(s, a)[0] + draws, lo, hi)
            per_action = np.stack([np.interp(nxt, grid.axes[0], q.values[:, ap])
                                   for ap in range(3)])
            ref = prob.cost(s, a) + 0.9 * per_action.min(axis=0).mean()
            assert abs(got[j, a] - ref) < 1e-3


def test_true_solve_matches_independent_vi_oracle():
    # dense straight-loop value iteration built only from np.interp/np.clip
    env = Synthetic1D(noise_std=0.1)
    gamma = 0.9
    grid = Grid.from_space(env.space, 401)
    q, _ = solve_true_fixed_point(env, gamma, grid, tol=1e-10, gh_nodes=64)

    offsets, w = QuadratureSource(env.f_star, env.noise_std, 64).offsets_and_weights(1)
    nodes = grid.axes[0]
    n_act = len(env.actions)
    lo, hi = env.space.lower[0], env.space.upper[0]
    atoms = np.empty((n_act, nodes.size, offsets.shape[0]))
    cost = np.empty((nodes.size, n_act))
    for a in range(n_act):
        for j, x in enumerate(nodes):
            s = np.array([x])
            atoms[a, j] = np.clip(env.f_star(s, a)[0] + offsets[:, 0], lo, hi)
            cost[j, a] = env.cost(s, a)
    qv = np.zeros((nodes.size, n_act))
    for _ in range(10_000):
        per_action = np.stack([
            np.interp(atoms.reshape(-1), nodes, qv[:, ap]).reshape(atoms.shape)
            for ap in range(n_act)])
        best = per_action.min(axis=0)                   # [n_act, n_nodes, n_scen]
        new = cost + gamma * (best @ w).T
        delta = np.max(np.abs(new - qv))
        qv = new
        if delta < 1e-10:
            break
    assert np.max(np.abs(q.values - qv)) < 1e-6


# ------------------------------------------------------------ diagnostics

def test_estimate_lipschitz_known_slopes():
    g = Grid((np.linspace(0.0, 1.0, 11),))
    nodes = g.axes[0]
    vals = np.column_stack([3.0 * nodes, np.abs(nodes - 0.45)])
    per_action, overall = estimate_lipschitz(GridQ(g, vals))
    assert per_action[0] == pytest.approx(3.0, abs=1e-9)
    assert per_action[1] == pytest.approx(1.0, abs=1e-9)
    assert overall == pytest.approx(3.0, abs=1e-9)


def test_estimate_lipschitz_2d_takes_axis_max():
    g = Grid((np.linspace(0, 1, 5), np.linspace(0, 1, 5)))
    ii, jj = np.meshgrid(g.axes[0], g.axes[1], indexing="ij")
    vals = (2.0 * ii + 0.5 * jj)[..., None]
    _, overall = estimate_lipschitz(GridQ(g, vals))
    assert overall == pytest.approx(2.0, abs=1e-9)


def test_kernel_coupling_constant_shift():
    space = StateSpace(lower=np.array([-5.0]), upper=np.array([5.0]))
    grid = Grid.from_space(space, 21)
    res = [[-0.3], [0.1], [0.2]]
    k1 = _kernel_1d(0.5, res, space)
    k2 = _kernel_1d(0.5, res, space)
    k2.model.regressor.b = np.array([0.25])      # shift every prediction by 0.25
    assert kernel_coupling(k1, k2, grid, 2) == pytest.approx(0.25, abs=1e-12)
    assert kernel_coupling(k1, k1, grid, 2) == 0.0
    with pytest.raises(ConfigError):
        kernel_coupling(k1, _kernel_1d(0.5, [[0.0]], space), grid, 2)


def test_kernel_coupling_mixed_residual_shift():
    # equal centers, residuals differing by +-d: mean atom distance is mean |d|
    space = StateSpace(lower=np.array([-5.0]), upper=np.array([5.0]))
    grid = Grid.from_space(space, 5)
    k1 = _kernel_1d(1.0, [[0.0], [0.0]], space)
    k2 = _kernel_1d(1.0, [[0.4], [-0.2]], space)
    assert kernel_coupling(k1, k2, grid, 2) == pytest.approx(0.3, abs=1e-12)


# ------------------------------------------------------------ consistency

def test_consistency_csv_format(tmp_path):
    rows = [ConsistencyRow(50, 0, 0.5, 0.25, 0.3, 123, 4.5),
            ConsistencyRow(200, 1, 0.1, 0.05, 0.08, 99, 6.25)]
    p = str(tmp_path / "c.csv")
    write_consistency_csv(rows, p)
    lines = open(p).read().splitlines()
    assert lines[0] == CONSISTENCY_HEADER
    assert lines[1].startswith("50,0,0.5,0.25,0.3,123,")
    assert len(lines) == 3
    # roundtrip through float() preserves the error columns exactly
    got = [float(tok) for tok in lines[2].split(",")[2:5]]
    assert got == [0.1, 0.05, 0.08]


def test_quadrature_solution_stable_in_node_count():
    # interpolation kinks cap the quadrature rate, so agreement is at the
    # 1e-3 level, far below the consistency thresholds that rely on q_star
    env = Synthetic1D(noise_std=0.1)
    g = Grid.from_space(env.space, 161)
    q64, _ = solve_true_fixed_point(env, 0.9, g, tol=1e-10, gh_nodes=64)
    q128, _ = solve_true_fixed_point(env, 0.9, g, tol=1e-10, gh_nodes=128)
    sup = np.max(np.abs(q64.values))
    assert np.max(np.abs(q64.values - q128.values)) < 2e-3 * max(sup, 1.0)


def test_consistency_curve_small():
    env = Synthetic1D(noise_std=0.1)
    grid = Grid.from_space(env.space, 101)
    rows, q_star, sols = consistency_curve(
        env, (30, 120), (0, 1), grid, tol=1e-9, keep_solutions=True)
    assert len(rows) == 4
    assert {(r.N, r.seed) for r in rows} == {(30, 0), (30, 1), (120, 0), (120, 1)}
    for r in rows:
        assert r.err_hatQ_vs_Qstar >= 0 and r.iters > 0
        # error split obeys the triangle inequality
        assert r.err_hatQ_vs_Qstar <= r.err_hatQ_vs_QstarN + r.err_QstarN_vs_Qstar + 1e-12
        cell = sols[(r.N, r.seed)]
        assert float(np.max(np.abs(cell["q_hat"].values - q_star.values))) == pytest.approx(
            r.err_hatQ_vs_Qstar, abs=1e-15)
    # rerunning a cell reproduces the same errors
    rows2, _ = consistency_curve(env, (30,), (0,), grid, tol=1e-9, q_star=q_star)
    assert rows2[0].err_hatQ_vs_Qstar == rows[0].err_hatQ_vs_Qstar
