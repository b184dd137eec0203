"""Primal-dual minimization of the penalized KL objective.

The iteration is the classical primal-dual splitting for
``min_x F(x) + H(L x)``: a dual ascent step through the prox of the
conjugate penalty, a primal descent step through the prox of the data
fidelity, and linear extrapolation of the primal pair:

    ``Q   <- prox_{sigma H*}(Q + sigma L(R_bar, O_bar))``
    ``X   <- prox_{tau F}((R, O) - tau L* Q)``
    ``X_bar <- 2 X - X_prev``

Step sizes saturate the convergence condition ``tau sigma ||L||^2 < 1``
using the analytic norm bound.  Iterates may be transiently infeasible
(positivity of R is enforced only through the dual block), so the reported
estimate is the final iterate projected onto the feasible set; the
projection magnitude is recorded in the diagnostics.

Stopping: the objective trace (computed without the indicator terms, which
the iterates may transiently violate) must have all its relative increments
below ``epsilon`` over a sliding window of ``k_smooth`` iterations.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DataError, ParameterError
from .model import CountMatrix, Estimate, objective
from .operators import (
    D2_NORM_SQ_BOUND,
    d2_apply,
    empty_graph,
    graph_adjoint,
    graph_apply,
    op_norm_bound,
    power_iteration,
)
from .serial_interval import convolve_past


@dataclass(frozen=True)
class SolverConfig:
    """Iteration controls.

    Desk-scale defaults; production-scale runs restore ``k_max = 1e7``
    through the CLI.  The cap must leave room for the slow tail phase of
    the primal-dual iteration (constant series with an l1-penalized
    outlier field can take ~8e5 iterations to pass a 1e-6 tolerance).
    ``trace_every`` sets the stride at which the objective trace (and
    hence the stopping rule) is evaluated.
    """

    epsilon: float = 1e-7
    k_max: int = 1000000
    k_smooth: int = 500
    step_safety: float = 0.99
    trace_every: int = 1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ParameterError("epsilon must be positive")
        if self.k_smooth < 1:
            raise ParameterError("k_smooth must be >= 1")
        if not (0.0 < self.step_safety < 1.0):
            raise ParameterError("step_safety must be in (0, 1)")
        if self.k_max < 1:
            raise ParameterError("k_max must be >= 1")
        if self.trace_every < 1:
            raise ParameterError("trace_every must be >= 1")


def step_sizes(hyper, d2_norm_sq=D2_NORM_SQ_BOUND, g_norm_sq=0.0, safety=0.99):
    """Saturated primal/dual steps ``tau = sigma = safety / sqrt(bound)``.

    ``bound`` is the analytic upper bound on ``||L||_op^2``, so
    ``tau * sigma * bound = safety^2 < 1`` by construction.
    """
    if not (0.0 < safety < 1.0):
        raise ParameterError("safety must be in (0, 1)")
    bound = op_norm_bound(hyper, d2_norm_sq=d2_norm_sq, g_norm_sq=g_norm_sq)
    if not (bound > 0) or math.isinf(bound):
        raise ParameterError("degenerate operator norm bound: %r" % bound)
    tau = safety / math.sqrt(bound)
    return tau, tau


def smoothed_increment(phi_trace, k, k_smooth):
    """Windowed relative increment of the objective trace.

    ``Psi_l = |Phi_l - Phi_{l-1}| / Phi_{l-1}``; returns
    ``max Psi_l`` over ``l in [max(k - k_smooth, 1), k]`` (0-indexed trace,
    ``k >= 1``).  A zero previous value yields 0 if the trace stays at zero
    and an infinite sentinel otherwise.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    phi = np.asarray(phi_trace, dtype=float)
    out = 0.0
    for ell in range(max(k - k_smooth, 1), k + 1):
        prev, cur = phi[ell - 1], phi[ell]
        if prev > 0:
            psi = abs(cur - prev) / prev
        else:
            psi = 0.0 if cur == 0 else math.inf
        out = max(out, psi)
    return out


def _graph_norm_sq(graph):
    """Power-iteration estimate of ``||G||_op^2`` (0 for edgeless graphs)."""
    if graph.num_edges == 0:
        return 0.0
    sigma, _ = power_iteration(
        lambda v: graph_apply(v, graph),
        lambda w: graph_adjoint(w, graph),
        shape=(graph.num_vertices, 1),
        tol=1e-12,
        max_iter=5000,
    )
    return sigma ** 2


class _TraceObjective:
    """Objective monitor without the indicator terms.

    ``live`` excludes dead entries (and, in pinned mode, the uninformative
    ones).  ``z > 0`` entries leaving the KL domain (``p <= 0``) give +inf;
    ``z = 0`` entries are evaluated at the feasible projection ``max(p, 0)``
    because their optimum sits exactly on the boundary and the iterates
    graze it within rounding error indefinitely; a strict sentinel there
    would reset the convergence window forever.  Masks and constants are
    frozen at construction so the per-iteration evaluation touches only the
    moving parts."""

    def __init__(self, zeff, phiZ, live, lam_t, lam_s, lam_o, graph, pinned):
        self.phiZ = phiZ
        self.pos = np.nonzero(live & (zeff > 0))
        self.zero = np.nonzero(live & (zeff == 0))
        self.zp = zeff[self.pos]
        self.log_zp_sum = float(self.zp @ np.log(self.zp)) - float(self.zp.sum())
        self.lam_t, self.lam_s, self.lam_o = lam_t, lam_s, lam_o
        self.graph, self.pinned = graph, pinned

    def __call__(self, R, O):
        P = R * self.phiZ + O
        pp = P[self.pos]
        if np.any(pp <= 0):
            return math.inf
        # zero-count entries: fidelity at the feasible projection max(p, 0)
        pz = np.maximum(P[self.zero], 0.0)
        val = self.log_zp_sum - float(self.zp @ np.log(pp)) + float(pp.sum()) + float(pz.sum())
        if R.shape[1] >= 3:
            val += self.lam_t * float(np.abs(d2_apply(R)).sum())
        if self.graph.num_edges:
            val += self.lam_s * float(np.abs(graph_apply(R, self.graph)).sum())
        if not self.pinned:
            val += self.lam_o * float(np.abs(O).sum())
        return val


@njit(cache=True)
def _cp_kernel(
    zeff,
    phiZ,
    dead,
    skip,
    e0,
    e1,
    lam_t,
    lam_s,
    lam_o,
    pinned,
    R,
    O,
    tau,
    sigma,
    epsilon,
    k_max,
    needed,
    trace_every,
):
    """Iteration loop: dual prox, primal prox, extrapolation, stopping.

    ``dead`` entries are held at (0, 0); ``skip`` entries contribute no
    fidelity to the trace (dead plus, in pinned mode, the entries whose
    fidelity is constant).  Scalar loops keep a fixed reduction order, so
    repeated runs are bit-identical.
    """
    D, T = zeff.shape
    E = e0.shape[0]

    def _tr(Rc, Oc):
        v = 0.0
        for d in range(D):
            for t in range(T):
                if skip[d, t]:
                    continue
                p = Rc[d, t] * phiZ[d, t] + Oc[d, t]
                z = zeff[d, t]
                if z > 0.0:
                    if p <= 0.0:
                        return np.inf
                    v += z * np.log(z / p) + p - z
                elif p > 0.0:
                    # zero-count entries sit on the domain boundary at the
                    # optimum; score the feasible projection max(p, 0) so
                    # rounding-level sign flips cannot reset the window
                    v += p
        for d in range(D):
            for t in range(1, T - 1):
                v += lam_t * abs(0.5 * Rc[d, t - 1] - Rc[d, t] + 0.5 * Rc[d, t + 1])
        for k in range(E):
            for t in range(T):
                v += lam_s * abs(Rc[e0[k], t] - Rc[e1[k], t])
        if not pinned:
            for d in range(D):
                for t in range(T):
                    v += lam_o * abs(Oc[d, t])
        return v

    Rb = R.copy()
    Ob = O.copy()
    Rn = np.empty((D, T))
    On = np.empty((D, T))
    radj = np.empty((D, T))
    # Q0 = L(R0, O0), kept feasible afterwards by the conjugate prox
    Q1 = np.empty((D, T - 2))
    Q2 = R.copy()
    Q3 = np.empty((E, T))
    Q4 = np.empty((D, T))
    for d in range(D):
        for i in range(T - 2):
            Q1[d, i] = lam_t * (0.5 * R[d, i] - R[d, i + 1] + 0.5 * R[d, i + 2])
    for k in range(E):
        for t in range(T):
            Q3[k, t] = lam_s * (R[e0[k], t] - R[e1[k], t])
    for d in range(D):
        for t in range(T):
            Q4[d, t] = lam_o * O[d, t]

    n_trace = k_max // trace_every + 2
    trace = np.empty(n_trace)
    incs = np.empty(n_trace)
    trace[0] = _tr(R, O)
    n_tr = 1
    small = 0
    converged = False
    iterations = 0

    for k in range(1, k_max + 1):
        iterations = k
        # dual ascent, then projection onto the conjugate's domain
        for d in range(D):
            for i in range(T - 2):
                q = Q1[d, i] + sigma * lam_t * (
                    0.5 * Rb[d, i] - Rb[d, i + 1] + 0.5 * Rb[d, i + 2]
                )
                Q1[d, i] = min(max(q, -1.0), 1.0)
        for d in range(D):
            for t in range(T):
                q = Q2[d, t] + sigma * Rb[d, t]
                Q2[d, t] = q if q < 0.0 else 0.0
        for kk in range(E):
            for t in range(T):
                q = Q3[kk, t] + sigma * lam_s * (Rb[e0[kk], t] - Rb[e1[kk], t])
                Q3[kk, t] = min(max(q, -1.0), 1.0)
        if not pinned:
            for d in range(D):
                for t in range(T):
                    q = Q4[d, t] + sigma * lam_o * Ob[d, t]
                    Q4[d, t] = min(max(q, -1.0), 1.0)

        # primal descent to (R, O) - tau L* Q, then the fidelity prox
        for d in range(D):
            for t in range(T):
                radj[d, t] = Q2[d, t]
        for d in range(D):
            for i in range(T - 2):
                v = lam_t * Q1[d, i]
                radj[d, i] += 0.5 * v
                radj[d, i + 1] -= v
                radj[d, i + 2] += 0.5 * v
        for kk in range(E):
            for t in range(T):
                v = lam_s * Q3[kk, t]
                radj[e0[kk], t] += v
                radj[e1[kk], t] -= v
        for d in range(D):
            for t in range(T):
                if dead[d, t]:
                    Rn[d, t] = 0.0
                    On[d, t] = 0.0
                    continue
                rin = R[d, t] - tau * radj[d, t]
                w = phiZ[d, t]
                z = zeff[d, t]
                if pinned:
                    if w > 0.0:
                        tb = tau * w * w
                        s = rin * w
                        tm = 0.5 * (s - tb + np.sqrt((s - tb) * (s - tb) + 4.0 * tb * z))
                        Rn[d, t] = tm / w
                    else:
                        Rn[d, t] = rin
                    On[d, t] = 0.0
                else:
                    oin = O[d, t] - tau * lam_o * Q4[d, t]
                    b = w * w + 1.0
                    tb = tau * b
                    s = rin * w + oin
                    tm = 0.5 * (s - tb + np.sqrt((s - tb) * (s - tb) + 4.0 * tb * z))
                    diff = (s - tm) / b
                    Rn[d, t] = rin - w * diff
                    On[d, t] = oin - diff

        for d in range(D):
            for t in range(T):
                Rb[d, t] = 2.0 * Rn[d, t] - R[d, t]
                R[d, t] = Rn[d, t]
                if not pinned:
                    Ob[d, t] = 2.0 * On[d, t] - O[d, t]
                    O[d, t] = On[d, t]

        if k % trace_every == 0 or k == k_max:
            f = _tr(R, O)
            prev = trace[n_tr - 1]
            if prev > 0.0:
                psi = abs(f - prev) / prev
            elif f == 0.0:
                psi = 0.0
            else:
                psi = np.inf
            trace[n_tr] = f
            incs[n_tr - 1] = psi
            n_tr += 1
            if psi < epsilon:
                small += 1
            else:
                small = 0
            if small >= needed:
                converged = True
                break

    return R, O, trace[:n_tr], incs[: n_tr - 1], iterations, converged


def run(Z, phi, graph, hyper, config=None, r_init=None, o_init=None):
    """Estimate ``(R, O)`` from counts by the primal-dual iteration.

    Parameters
    ----------
    Z : CountMatrix or ndarray
        Daily counts, D x T.  Standardization is the caller's choice; the
        solver works in whatever units it is given.
    phi : SerialInterval
    graph : EpiGraph or None
        ``None`` means no spatial coupling (equivalent to an edgeless graph).
    hyper : Hyperparameters
        ``lambda_t`` must be positive.  ``lambda_o = inf`` pins ``O = 0``
        and drops the entries where ``Phi Z <= 0 < Z`` from the fidelity
        (they are constant in the remaining variables).
    config : SolverConfig
    r_init, o_init : ndarray, optional
        Override the default start ``R0 = Z, O0 = 0``.  The minimizing
        intensity is unique, so this changes nothing at convergence; it
        exists to exercise exactly that.

    Returns
    -------
    Estimate
    """
    values = Z.values if isinstance(Z, CountMatrix) else np.asarray(Z, dtype=float)
    config = config or SolverConfig()
    D, T = values.shape
    if T < 3:
        raise DataError("estimation needs T >= 3 days")
    if not (hyper.lambda_t > 0):
        raise ParameterError("lambda_t must be positive for estimation")
    pinned = hyper.pinned
    lam_t, lam_s = hyper.lambda_t, hyper.lambda_s
    lam_o = 0.0 if pinned else hyper.lambda_o
    graph = graph if graph is not None else empty_graph(D)
    if graph.num_vertices != D:
        raise DataError("graph vertex count does not match territory count")

    phiZ = convolve_past(values, phi)
    zeff = np.maximum(values, 0.0)
    dead = (values == 0) & (phiZ == 0)
    live = ~dead
    uninformative = np.zeros_like(dead)
    if pinned:
        uninformative = (phiZ <= 0) & (zeff > 0) & live
        live = live & ~uninformative

    g_nsq = _graph_norm_sq(graph) if lam_s > 0 else 0.0
    tau, sigma = step_sizes(
        hyper, d2_norm_sq=D2_NORM_SQ_BOUND, g_norm_sq=g_nsq, safety=config.step_safety
    )

    trace_val = _TraceObjective(zeff, phiZ, live, lam_t, lam_s, lam_o, graph, pinned)

    # initialization R0 = Z, O0 = 0 (unless overridden), dead entries zeroed
    R = values.copy() if r_init is None else np.array(r_init, dtype=float).reshape(D, T)
    O = np.zeros_like(R) if o_init is None else np.array(o_init, dtype=float).reshape(D, T)
    if pinned:
        O = np.zeros_like(R)
    R[dead] = 0.0
    O[dead] = 0.0
    phi0 = trace_val(R, O)
    if not math.isfinite(phi0):
        # repair: seed the counts through O where there is no history, and
        # zero the entries whose raw value is negative
        bad = (zeff > 0) & (phiZ <= 0)
        R[bad] = 0.0
        if not pinned:
            O[bad] = zeff[bad]
        R[values < 0] = 0.0
        phi0 = trace_val(R, O)
        if not math.isfinite(phi0):
            raise DataError("objective not finite at initialization after repair")

    # the stopping window [k - k_smooth, k] is inclusive: k_smooth + 1
    # increments must sit below epsilon for smoothed_increment(k) < epsilon
    consecutive_needed = max(1, -(-config.k_smooth // config.trace_every)) + 1
    skip = dead | uninformative
    R, O, objective_trace, increment_trace, iterations, converged = _cp_kernel(
        zeff,
        phiZ,
        dead,
        skip,
        graph.edge_tail.astype(np.int64),
        graph.edge_head.astype(np.int64),
        float(lam_t),
        float(lam_s),
        float(lam_o),
        bool(pinned),
        np.ascontiguousarray(R),
        np.ascontiguousarray(O),
        float(tau),
        float(sigma),
        float(config.epsilon),
        int(config.k_max),
        int(consecutive_needed),
        int(config.trace_every),
    )

    # final feasibility projection
    r_hat = np.maximum(R, 0.0)
    o_hat = O.copy()
    r_hat[dead] = 0.0
    o_hat[dead] = 0.0
    p_hat = r_hat * phiZ + o_hat
    neg = p_hat < 0
    if not pinned:
        o_hat[neg] -= p_hat[neg]
    p_hat[neg] = 0.0
    projection_shift = max(
        float(np.abs(r_hat - R).max(initial=0.0)), float(np.abs(o_hat - O).max(initial=0.0))
    )

    final_objective = objective(r_hat, o_hat, values, phiZ, graph, hyper)
    return Estimate(
        r_hat=r_hat,
        o_hat=o_hat,
        p_hat=p_hat,
        iterations=iterations,
        objective_trace=objective_trace.copy(),
        increment_trace=increment_trace.copy(),
        converged=converged,
        objective=final_objective,
        diagnostics={
            "projection_max_shift": projection_shift,
            "dropped_fidelity_sites": int(uninformative.sum()),
            "tau": tau,
            "sigma": sigma,
            "graph_norm_sq_estimate": g_nsq,
        },
    )


def solve_standardized(Z, phi, graph, hyper, config=None):
    """Standardize counts per territory, solve, and un-scale the outputs.

    Returns an Estimate in the original count units: ``R`` is scale
    covariant (unchanged), ``O`` and ``P`` are multiplied back by the
    per-territory scale.  The traces and objective refer to the
    standardized problem that was actually solved.
    """
    from .model import standardize

    z_std, alpha = standardize(Z)
    est = run(z_std, phi, graph, hyper, config)
    est.o_hat = est.o_hat * alpha[:, None]
    est.p_hat = est.p_hat * alpha[:, None]
    est.diagnostics["alpha"] = alpha
    return est
