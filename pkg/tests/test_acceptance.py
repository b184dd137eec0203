"""Acceptance suite: one verdict line per shipped guarantee.

Each test pins a tolerance the package promises and checks it against an
independent reference: closed-form proximal operators against numeric
minimizers, operator adjoints and the analytic norm bound against power
iteration, the primal-dual solver against a brute-force subgradient
oracle, scale covariance of the estimator, the discretized serial-interval
moments, ground-truth recovery on synthetic epidemics, degenerate inputs,
the bundled graph fixture, and bit-level determinism of the command-line
pipeline.  Randomized tests use frozen seeds; solver settings are pinned
so reruns reproduce the measured margins.
"""

import json
import math
import time

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from repronum.cli import main
from repronum.epidata import load_graph, write_long
from repronum.model import CountMatrix, Hyperparameters, objective, sliding_median_baseline
from repronum.operators import (
    DualVariable,
    EpiGraph,
    graph_adjoint,
    graph_apply,
    l_adjoint,
    l_apply,
    op_norm_bound,
    power_iteration,
    prox_f,
    prox_h_conj,
    prox_kl_scalar,
    prox_nonneg,
    prox_soft_threshold,
)
from repronum.serial_interval import convolve_past
from repronum.solver import SolverConfig, run, solve_standardized, step_sizes
from repronum.synth import ScenarioSpec, generate, oracle_solve, piecewise_linear


def _scalar_oracle(fun, lo, hi):
    res = minimize_scalar(fun, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return float(res.x)


def _chain_graph(D):
    return EpiGraph(num_vertices=D, edge_tail=np.arange(D - 1), edge_head=np.arange(1, D))


def _random_graph(rng, D, p):
    tails, heads = [], []
    for a in range(D):
        for b in range(a + 1, D):
            if rng.random() < p:
                tails.append(a)
                heads.append(b)
    if not tails:
        return None
    return EpiGraph(num_vertices=D, edge_tail=np.array(tails), edge_head=np.array(heads))


def _inner_dual(A, B):
    return (
        float(np.sum(A.q1 * B.q1))
        + float(np.sum(A.q2 * B.q2))
        + float(np.sum(A.q3 * B.q3))
        + float(np.sum(A.q4 * B.q4))
    )


def test_c01_prox_operators_match_numeric_minimizers():
    rng = np.random.default_rng(101)
    t_start = time.perf_counter()

    for _ in range(1000):
        q = rng.normal(0.0, 3.0)
        s = rng.uniform(0.01, 2.0)
        ref = _scalar_oracle(lambda x: 0.5 * (x - q) ** 2 + s * abs(x), -abs(q) - 1.0, abs(q) + 1.0)
        assert abs(float(prox_soft_threshold(q, s)) - ref) < 1e-6

    for _ in range(1000):
        q = rng.normal(0.0, 3.0)
        ref = _scalar_oracle(lambda x: 0.5 * (x - q) ** 2, 0.0, abs(q) + 1.0)
        assert abs(float(prox_nonneg(q)) - ref) < 1e-6

    for _ in range(1000):
        p0 = rng.normal(0.0, 3.0)
        tau = rng.uniform(0.01, 2.0)
        z = 0.0 if rng.random() < 0.25 else rng.uniform(0.1, 20.0)
        hi = abs(p0) + 4.0 * tau * max(z, 1.0) + 10.0
        if z > 0:
            ref = _scalar_oracle(
                lambda x: 0.5 * (x - p0) ** 2 + tau * (x - z * np.log(x)), 1e-14, hi
            )
        else:
            ref = _scalar_oracle(lambda x: 0.5 * (x - p0) ** 2 + tau * x, 0.0, hi)
        assert abs(float(prox_kl_scalar(p0, z, tau)) - ref) < 1e-6

    # joint fidelity prox against a constrained 2-D minimizer
    for _ in range(1000):
        r = rng.normal(0.0, 2.0)
        o = rng.normal(0.0, 2.0)
        tau = rng.uniform(0.02, 1.0)
        z = 0.0 if rng.random() < 0.25 else float(rng.integers(1, 20))
        phiz = rng.uniform(0.2, 15.0)
        rn_got, on_got = prox_f(r, o, z, phiz, tau)

        def obj(x):
            p = max(x[0] * phiz + x[1], 1e-300)
            fid = z * np.log(z / p) + p - z if z > 0 else p
            return 0.5 * ((x[0] - r) ** 2 + (x[1] - o) ** 2) + tau * fid

        def grad(x):
            p = max(x[0] * phiz + x[1], 1e-300)
            dfid = 1.0 - z / p if z > 0 else 1.0
            return np.array([x[0] - r + tau * dfid * phiz, x[1] - o + tau * dfid])

        cons = [
            {
                "type": "ineq",
                "fun": lambda x: x[0] * phiz + x[1],
                "jac": lambda x: np.array([phiz, 1.0]),
            }
        ]
        best = None
        for x0 in (
            np.array([max(r, 1.0), max(o, 1.0)]),
            np.array([1.0, 1.0]),
            np.array([abs(r) + 0.5, abs(o) + 0.5]),
        ):
            res = minimize(
                obj, x0=x0, jac=grad, method="SLSQP", constraints=cons,
                options={"maxiter": 500, "ftol": 1e-16},
            )
            if best is None or res.fun < best.fun:
                best = res
        assert abs(rn_got - best.x[0]) < 1e-6
        assert abs(on_got - best.x[1]) < 1e-6

    # dual prox blocks are projections; check them coordinatewise
    for _ in range(1000):
        sigma = rng.uniform(0.05, 2.0)
        Q = DualVariable(
            q1=rng.normal(0.0, 2.0, (1, 1)),
            q2=rng.normal(0.0, 2.0, (1, 3)),
            q3=rng.normal(0.0, 2.0, (0, 3)),
            q4=rng.normal(0.0, 2.0, (1, 3)),
        )
        out = prox_h_conj(Q, sigma)
        for blk, kind in (("q1", "box"), ("q2", "nonpos"), ("q4", "box")):
            for v, got in zip(getattr(Q, blk).ravel(), getattr(out, blk).ravel()):
                if kind == "box":
                    ref = _scalar_oracle(lambda x: 0.5 * (x - v) ** 2, -1.0, 1.0)
                else:
                    ref = _scalar_oracle(lambda x: 0.5 * (x - v) ** 2, min(v, 0.0) - 1.0, 0.0)
                assert abs(got - ref) < 1e-6

    assert time.perf_counter() - t_start < 30.0


def test_c02_stacked_operator_adjoint_identity():
    rng = np.random.default_rng(202)
    for _ in range(100):
        D = int(rng.integers(1, 11))
        T = int(rng.integers(3, 51))
        graph = _random_graph(rng, D, 0.3)
        if graph is None:
            graph = EpiGraph(num_vertices=D, edge_tail=np.array([], dtype=int),
                             edge_head=np.array([], dtype=int))
        hyper = Hyperparameters(
            lambda_t=float(rng.uniform(0.1, 5.0)),
            lambda_s=float(rng.uniform(0.0, 1.0)),
            lambda_o=float(rng.uniform(0.01, 2.0)),
        )
        R = rng.standard_normal((D, T))
        O = rng.standard_normal((D, T))
        Y = DualVariable(
            q1=rng.standard_normal((D, T - 2)),
            q2=rng.standard_normal((D, T)),
            q3=rng.standard_normal((graph.num_edges, T)),
            q4=rng.standard_normal((D, T)),
        )
        lhs = _inner_dual(l_apply(R, O, graph, hyper), Y)
        r_adj, o_adj = l_adjoint(Y, graph, hyper)
        rhs = float(np.sum(R * r_adj)) + float(np.sum(O * o_adj))
        assert abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30) < 1e-10


def test_c03_norm_bound_dominates_power_estimate_and_frozen_steps():
    rng = np.random.default_rng(303)
    for i in range(50):
        D = int(rng.integers(1, 9))
        T = int(rng.integers(3, 41))
        graph = _random_graph(rng, D, 0.4)
        if graph is None:
            graph = EpiGraph(num_vertices=D, edge_tail=np.array([], dtype=int),
                             edge_head=np.array([], dtype=int))
        lam_o = math.inf if i % 10 == 9 else float(rng.uniform(0.01, 2.0))
        hyper = Hyperparameters(
            lambda_t=float(rng.uniform(0.2, 5.0)),
            lambda_s=float(rng.uniform(0.0, 2.0)),
            lambda_o=lam_o,
        )
        if graph.num_edges:
            g_sigma, _ = power_iteration(
                lambda R: graph_apply(R, graph), lambda W: graph_adjoint(W, graph), (D, T)
            )
            g_nsq = g_sigma ** 2
        else:
            g_nsq = 0.0

        def ap(X):
            return l_apply(X[:D], X[D:], graph, hyper)

        def ad(Q):
            return np.vstack(l_adjoint(Q, graph, hyper))

        sigma, _ = power_iteration(ap, ad, (2 * D, T))
        bound = op_norm_bound(hyper, d2_norm_sq=4.0, g_norm_sq=g_nsq)
        assert sigma ** 2 <= bound + 1e-9
        tau, sig = step_sizes(hyper, d2_norm_sq=4.0, g_norm_sq=g_nsq)
        assert tau * sig * sigma ** 2 < 1.0

    tau, sig = step_sizes(Hyperparameters(lambda_t=3.5, lambda_s=0.0, lambda_o=0.025))
    frozen = 0.14000714267493638  # 0.99 / sqrt(50)
    assert abs(tau - frozen) < 1e-12
    assert abs(sig - frozen) < 1e-12


def test_c04_solver_matches_subgradient_oracle_on_tiny_instances(phi):
    cfg = SolverConfig(epsilon=1e-9, k_max=500000, k_smooth=200)
    t_start = time.perf_counter()
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        D = int(rng.integers(1, 4))
        T = int(rng.integers(6, 16))
        Z = rng.poisson(rng.uniform(2.0, 10.0), size=(D, T)).astype(float)
        graph, lam_s = None, 0.0
        if D >= 2:
            graph = _random_graph(rng, D, 0.6)
            if graph is not None:
                lam_s = float(rng.uniform(0.001, 0.3))
        hyper = Hyperparameters(
            lambda_t=float(np.exp(rng.uniform(np.log(0.2), np.log(3.5)))),
            lambda_s=lam_s,
            lambda_o=float(rng.uniform(0.025, 0.5)),
        )
        est = run(Z, phi, graph, hyper, cfg)
        r_orc, o_orc, obj_orc = oracle_solve(Z, phi, graph, hyper)
        assert est.objective <= obj_orc + 1e-4 * (1.0 + abs(obj_orc))
        p_orc = r_orc * convolve_past(Z, phi) + o_orc
        assert np.abs(est.p_hat - p_orc).max() <= 1e-3
    assert time.perf_counter() - t_start < 300.0


def test_c05_random_feasible_initializations_agree(phi):
    cfg = SolverConfig(epsilon=1e-12, k_max=3000000, k_smooth=200)
    for i in range(10):
        rng = np.random.default_rng(2000 + i)
        D = int(rng.integers(1, 4))
        T = int(rng.integers(8, 21))
        Z = rng.poisson(rng.uniform(2.0, 10.0), size=(D, T)).astype(float)
        graph, lam_s = None, 0.0
        if D >= 2 and rng.random() < 0.7:
            graph = _chain_graph(D)
            lam_s = float(rng.uniform(0.01, 0.2))
        hyper = Hyperparameters(
            lambda_t=float(rng.uniform(0.5, 3.5)),
            lambda_s=lam_s,
            lambda_o=float(rng.uniform(0.025, 0.3)),
        )
        estimates = []
        for _ in range(2):
            r0 = rng.uniform(0.0, 2.0, size=(D, T))
            o0 = rng.uniform(0.1, 1.0, size=(D, T))
            estimates.append(run(Z, phi, graph, hyper, cfg, r_init=r0, o_init=o0))
        assert np.abs(estimates[0].p_hat - estimates[1].p_hat).max() <= 1e-4


def test_c06_objective_convex_and_nonnegative(phi):
    rng = np.random.default_rng(606)
    for _ in range(10):
        D = int(rng.integers(1, 4))
        T = int(rng.integers(3, 13))
        Z = rng.poisson(rng.uniform(1.0, 8.0), size=(D, T)).astype(float)
        phiZ = convolve_past(Z, phi)
        dead = (Z == 0) & (phiZ == 0)
        graph = _chain_graph(D) if D >= 2 else None
        hyper = Hyperparameters(
            lambda_t=float(rng.uniform(0.2, 4.0)),
            lambda_s=float(rng.uniform(0.0, 0.5)) if graph is not None else 0.0,
            lambda_o=float(rng.uniform(0.02, 0.5)),
        )

        def draw():
            R = rng.uniform(0.0, 3.0, size=(D, T))
            O = rng.uniform(0.05, 2.0, size=(D, T))
            R[dead] = 0.0
            O[dead] = 0.0
            return R, O

        for _ in range(100):
            Ra, Oa = draw()
            Rb, Ob = draw()
            theta = float(rng.uniform(0.0, 1.0))
            ja = objective(Ra, Oa, Z, phiZ, graph, hyper)
            jb = objective(Rb, Ob, Z, phiZ, graph, hyper)
            jc = objective(
                theta * Ra + (1 - theta) * Rb,
                theta * Oa + (1 - theta) * Ob,
                Z, phiZ, graph, hyper,
            )
            assert ja >= 0.0 and jb >= 0.0 and jc >= 0.0
            assert jc <= theta * ja + (1 - theta) * jb + 1e-9


def test_c07_scaling_covariance(phi):
    rng = np.random.default_rng(77)
    Z = rng.poisson(rng.uniform(4.0, 12.0, size=(1, 40))).astype(float)
    Z[0, 20] += 60.0
    base_h = Hyperparameters(lambda_t=0.35, lambda_s=0.0, lambda_o=0.025)
    cfg = SolverConfig(epsilon=1e-11, k_max=3000000, k_smooth=100)
    base = run(Z, phi, None, base_h, cfg)
    phiZ = convolve_past(Z, phi)

    point_rng = np.random.default_rng(707)
    for alpha in (0.1, 10.0):
        hyper_a = Hyperparameters(
            lambda_t=alpha * base_h.lambda_t, lambda_s=0.0, lambda_o=base_h.lambda_o
        )
        est_a = run(alpha * Z, phi, None, hyper_a, cfg)
        assert np.abs(est_a.r_hat - base.r_hat).max() <= 1e-5
        o_scaled = alpha * base.o_hat
        o_norm = np.abs(o_scaled).max()
        assert o_norm > 0.0
        assert np.abs(est_a.o_hat - o_scaled).max() / o_norm <= 1e-5

        phiZ_a = convolve_past(alpha * Z, phi)
        for _ in range(25):
            R = point_rng.uniform(0.0, 3.0, size=Z.shape)
            O = point_rng.uniform(0.05, 2.0, size=Z.shape)
            j_base = objective(R, O, Z, phiZ, None, base_h)
            j_alpha = objective(R, alpha * O, alpha * Z, phiZ_a, None, hyper_a)
            assert abs(j_alpha - alpha * j_base) / abs(alpha * j_base) <= 1e-10

    # identity with spatial coupling on a small coupled instance
    Zg = point_rng.poisson(6.0, size=(3, 20)).astype(float)
    phiZg = convolve_past(Zg, phi)
    graph = _chain_graph(3)
    hg = Hyperparameters(lambda_t=0.5, lambda_s=0.1, lambda_o=0.025)
    for alpha in (0.1, 10.0):
        hg_a = Hyperparameters(lambda_t=alpha * 0.5, lambda_s=alpha * 0.1, lambda_o=0.025)
        phiZg_a = convolve_past(alpha * Zg, phi)
        for _ in range(25):
            R = point_rng.uniform(0.0, 3.0, size=Zg.shape)
            O = point_rng.uniform(0.05, 2.0, size=Zg.shape)
            j_base = objective(R, O, Zg, phiZg, graph, hg)
            j_alpha = objective(R, alpha * O, alpha * Zg, phiZg_a, graph, hg_a)
            assert abs(j_alpha - alpha * j_base) / abs(alpha * j_base) <= 1e-10


def test_c08_serial_interval_moments(phi):
    assert abs(float(phi.weights.sum()) - 1.0) <= 1e-12
    assert 6.1 <= phi.mean_lag() <= 7.1
    assert 3.0 <= phi.std_lag() <= 4.0


def test_c09_synthetic_recovery_and_joint_beats_two_step(phi):
    T = 300
    r_row = piecewise_linear([(1, 1.30), (120, 0.75), (220, 1.15)], T)
    cfg = SolverConfig(epsilon=1e-6, k_max=1000000)
    joint_h = Hyperparameters(lambda_t=3.5, lambda_s=0.0, lambda_o=0.025)
    pinned_h = Hyperparameters(lambda_t=3.5, lambda_s=0.0, lambda_o=math.inf)
    interior = slice(30, 270)

    # outlier-free recovery
    for seed in range(1, 21):
        spec = ScenarioSpec(
            r_true=r_row[None, :], outlier_schedule=(), seed=seed,
            initial_counts=np.array([60.0]),
        )
        Z, _ = generate(spec, phi)
        est = solve_standardized(Z, phi, None, joint_h, cfg)
        mae = float(np.abs(est.r_hat[0, interior] - r_row[interior]).mean())
        assert mae <= 0.15

    # spike/correction pairs on 10 percent of the days
    schedule = []
    for k in range(15):
        day = 30 + 18 * k
        schedule += [(1, day, 80.0), (1, day + 1, -45.0)]
    wins = 0
    for seed in range(1, 21):
        spec = ScenarioSpec(
            r_true=r_row[None, :], outlier_schedule=tuple(schedule), seed=seed,
            initial_counts=np.array([60.0]),
        )
        Z, _ = generate(spec, phi)
        est_joint = solve_standardized(Z, phi, None, joint_h, cfg)
        mae_joint = float(np.abs(est_joint.r_hat[0, interior] - r_row[interior]).mean())
        clean, _ = sliding_median_baseline(Z, window=7, k=2.5)
        est_two_step = solve_standardized(clean, phi, None, pinned_h, cfg)
        mae_two_step = float(np.abs(est_two_step.r_hat[0, interior] - r_row[interior]).mean())
        wins += mae_joint < mae_two_step
    assert wins >= 16


def test_c10_degenerate_inputs(phi):
    hyper = Hyperparameters(lambda_t=3.5, lambda_s=0.0, lambda_o=0.025)
    est = run(np.zeros((2, 10)), phi, None, hyper, SolverConfig(epsilon=1e-6, k_max=10000))
    assert np.all(est.r_hat == 0.0)
    assert np.all(est.o_hat == 0.0)
    assert np.all(est.p_hat == 0.0)
    assert est.objective == 0.0
    assert est.converged

    # quiet patches (no counts, no history) must come back exactly zero
    rng = np.random.default_rng(1010)
    Z = np.zeros((3, 20))
    Z[0] = rng.poisson(5.0, 20) + 1.0
    Z[1, 10:] = rng.poisson(5.0, 10) + 1.0
    phiZ = convolve_past(Z, phi)
    dead = (Z == 0) & (phiZ == 0)
    assert dead[1, :10].all() and dead[2].all()
    est = run(Z, phi, None, hyper, SolverConfig(epsilon=1e-8, k_max=1000000))
    assert np.all(est.r_hat[dead] == 0.0)
    assert np.all(est.o_hat[dead] == 0.0)
    assert np.all(est.p_hat[dead] == 0.0)


def test_c11_bundled_graph_fixture_dimensions(data_dir):
    graph = load_graph(data_dir / "france_graph.txt")
    assert graph.num_vertices == 96
    assert graph.num_edges == 475


def test_c12_cli_reruns_bit_identical(tmp_path):
    rng = np.random.default_rng(1212)
    values = rng.poisson(rng.uniform(5.0, 15.0, size=(1, 40))).astype(float)
    values[0, 25] += 40.0
    matrix = CountMatrix.from_values(values)
    path = tmp_path / "counts.csv"
    write_long(path, matrix, value_name="count")

    args = ["estimate", "--input", str(path), "--trace", "--epsilon", "1e-6",
            "--k-smooth", "100"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out-dir", str(out_a)]) == 0
    assert main(args + ["--out-dir", str(out_b)]) == 0

    names_a = sorted(p.name for p in out_a.iterdir())
    names_b = sorted(p.name for p in out_b.iterdir())
    assert names_a == names_b
    for name in names_a:
        if name == "manifest.json":
            man_a = json.loads((out_a / name).read_text())
            man_b = json.loads((out_b / name).read_text())
            man_a.pop("wall_time_seconds")
            man_b.pop("wall_time_seconds")
            assert man_a == man_b
        else:
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
