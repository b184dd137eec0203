"""Synthetic epidemics with known ground truth, and a brute-force oracle.

The forward model draws ``Z[d, t] ~ Poisson(max{R_true (Phi Z) + O_true, 0})``
sequentially in time after seeding the first ``tau_phi`` days with fixed
initial counts.  Randomness comes from a numpy ``Generator`` on the PCG64
stream seeded by the scenario; Poisson variates use numpy's sampler
(sequential inversion for mean < 10, PTRS transformed rejection above), so
runs are bit-reproducible per seed on a given numpy version and
distribution-reproducible across reimplementations.

``oracle_solve`` is an independent check on the primal-dual solver for tiny
instances: projected subgradient descent with diminishing steps, feasibility
projection, and stage averaging, run in preconditioned coordinates
``u = max(Phi Z, 1) * r`` to keep the KL curvature comparable across
entries.  It shares no iteration machinery with the solver module.
"""

import math
import re
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DataError, FormatError, ParameterError
from .model import CountMatrix, default_dates
from .serial_interval import convolve_past


@dataclass(frozen=True)
class ScenarioSpec:
    """Ground truth for one synthetic epidemic.

    Attributes
    ----------
    r_true : ndarray, D x T
        Nonnegative reproduction numbers (piecewise-linear rows when built
        from a scenario file).
    outlier_schedule : tuple of (d, t, magnitude)
        1-based territory and day indices; magnitudes add to the Poisson
        intensity on that day (the intensity is floored at 0 afterwards).
    seed : int
    initial_counts : ndarray, D
        Positive integers used verbatim for the first ``tau_phi`` days.
    """

    r_true: np.ndarray
    outlier_schedule: tuple
    seed: int
    initial_counts: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r_true, dtype=float)
        if r.ndim != 2:
            raise ParameterError("r_true must be a D x T matrix")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ParameterError("r_true must be finite and nonnegative")
        object.__setattr__(self, "r_true", r)
        D, T = r.shape
        init = np.asarray(self.initial_counts, dtype=float)
        if init.shape != (D,):
            raise ParameterError("initial_counts must have one entry per territory")
        if np.any(init <= 0) or np.any(init != np.round(init)):
            raise ParameterError("initial_counts must be positive integers")
        object.__setattr__(self, "initial_counts", init)
        sched = tuple((int(d), int(t), float(m)) for d, t, m in self.outlier_schedule)
        for d, t, m in sched:
            if not (1 <= d <= D):
                raise ParameterError("outlier territory %d out of range 1..%d" % (d, D))
            if not (1 <= t <= T):
                raise ParameterError("outlier day %d out of range 1..%d" % (t, T))
        object.__setattr__(self, "outlier_schedule", sched)

    @property
    def shape(self):
        return self.r_true.shape


def piecewise_linear(breakpoints, num_days):
    """Materialize one row of R_true from (day, value) breakpoints.

    Days are 1-based, strictly increasing, within ``[1, num_days]``; the
    curve is linear between breakpoints and flat outside them.
    """
    if not breakpoints:
        raise ParameterError("need at least one breakpoint")
    times = np.array([float(t) for t, _ in breakpoints])
    values = np.array([float(v) for _, v in breakpoints])
    if np.any(np.diff(times) <= 0):
        raise ParameterError("breakpoint days must be strictly increasing")
    if times[0] < 1 or times[-1] > num_days:
        raise ParameterError("breakpoint days must lie in [1, %d]" % num_days)
    if np.any(values < 0):
        raise ParameterError("breakpoint values must be nonnegative")
    return np.interp(np.arange(1, num_days + 1, dtype=float), times, values)


def _scenario_error(msg, line):
    raise FormatError(msg, line=line)


def parse_scenario(path):
    """Parse a plain-text ``key = value`` scenario file.

    Recognized keys (``#`` starts a comment, blank lines ignored)::

        territories     = 1                      # optional, default 1
        days            = 300
        seed            = 11
        initial_counts  = 60                     # scalar or comma list of D
        r_breakpoints   = 1:1.3, 120:0.75, 220:1.15
        r_breakpoints_2 = 1:1.0, 300:1.0         # optional per-territory row
        outliers        = 1:30:40, 1:60:-25      # optional d:t:magnitude list
    """
    entries = {}
    with open(path) as fh:
        for i, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                _scenario_error("expected key = value, found %r" % raw.strip(), i)
            key, _, value = text.partition("=")
            key = key.strip().lower()
            if key in entries:
                _scenario_error("duplicate key %r" % key, i)
            entries[key] = (value.strip(), i)

    def take(key, default=None, required=False):
        if key in entries:
            return entries.pop(key)
        if required:
            raise FormatError("missing required key %r" % key, line=1)
        return (default, None)

    def as_int(pair, key):
        value, line = pair
        try:
            return int(value)
        except (TypeError, ValueError):
            _scenario_error("bad integer for %r: %r" % (key, value), line)

    D = as_int(take("territories", default="1"), "territories")
    T = as_int(take("days", required=True), "days")
    seed = as_int(take("seed", required=True), "seed")
    if D < 1 or T < 1:
        raise FormatError("territories and days must be positive", line=1)

    init_text, init_line = take("initial_counts", required=True)
    parts = [p.strip() for p in init_text.split(",")]
    try:
        init_vals = [int(p) for p in parts]
    except ValueError:
        _scenario_error("bad initial_counts %r" % init_text, init_line)
    if len(init_vals) == 1:
        init_vals = init_vals * D
    if len(init_vals) != D:
        _scenario_error("initial_counts needs 1 or %d entries" % D, init_line)

    def parse_breakpoints(text, line):
        out = []
        for token in text.split(","):
            token = token.strip()
            m = re.fullmatch(r"(\d+)\s*:\s*([-+0-9.eE]+)", token)
            if not m:
                _scenario_error("bad breakpoint %r (expected day:value)" % token, line)
            out.append((int(m.group(1)), float(m.group(2))))
        return out

    base_text, base_line = take("r_breakpoints", required=True)
    base_row = piecewise_linear(parse_breakpoints(base_text, base_line), T)
    r_true = np.tile(base_row, (D, 1))
    for d in range(1, D + 1):
        key = "r_breakpoints_%d" % d
        if key in entries:
            text, line = entries.pop(key)
            r_true[d - 1] = piecewise_linear(parse_breakpoints(text, line), T)

    schedule = []
    out_text, out_line = take("outliers", default="")
    if out_text:
        for token in out_text.split(","):
            token = token.strip()
            m = re.fullmatch(r"(\d+)\s*:\s*(\d+)\s*:\s*([-+0-9.eE]+)", token)
            if not m:
                _scenario_error(
                    "bad outlier %r (expected territory:day:magnitude)" % token, out_line
                )
            schedule.append((int(m.group(1)), int(m.group(2)), float(m.group(3))))

    if entries:
        key, (_, line) = next(iter(entries.items()))
        _scenario_error("unknown key %r" % key, line)

    return ScenarioSpec(
        r_true=r_true,
        outlier_schedule=tuple(schedule),
        seed=seed,
        initial_counts=np.array(init_vals, dtype=float),
    )


def outlier_matrix(spec):
    """Materialize the outlier schedule as a dense D x T matrix."""
    O = np.zeros(spec.shape)
    for d, t, m in spec.outlier_schedule:
        O[d - 1, t - 1] += m
    return O


def generate(spec, phi):
    """Draw one dataset from the forward model.

    The first ``min(tau_phi, T)`` days are set to ``initial_counts``
    deterministically (outliers scheduled there do not perturb them); every
    later day is drawn territory-major as
    ``Poisson(max{r_true * (Phi Z) + O_true, 0})`` using the scenario's
    PCG64 stream.

    Returns
    -------
    (CountMatrix, ndarray)
        The counts and the dense ``O_true`` matrix.
    """
    D, T = spec.shape
    O_true = outlier_matrix(spec)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    Z = np.zeros((D, T))
    warmup = min(phi.tau_phi, T)
    Z[:, :warmup] = spec.initial_counts[:, None]
    w = phi.weights
    for t in range(warmup, T):
        lags = min(t, phi.tau_phi)
        phiz_t = w[:lags] @ Z[:, t - lags : t][:, ::-1].T
        lam = np.maximum(spec.r_true[:, t] * phiz_t + O_true[:, t], 0.0)
        Z[:, t] = rng.poisson(lam)
    matrix = CountMatrix(
        values=Z,
        territories=tuple("territory_%d" % (d + 1) for d in range(D)),
        dates=tuple(default_dates(T)),
    )
    return matrix, O_true


# --- independent reference solver -----------------------------------------

ORACLE_MAX_D = 3
ORACLE_MAX_T = 15
_STEP0 = 0.3
_STAGE_GROW = 1.25
_STEP_SHRINK = 0.6
_TAIL_FRACTION = 0.5
_MIN_BUDGET = 1_000_000
_MAX_BUDGET = 70_000_000


@njit(cache=True, fastmath=True)
def _rsg(Z, phiZ, e0, e1, lt, ls, lo, pinned, R0, O0, budget, n0, c0, grow, shrink, tail):
    # Projected subgradient descent in preconditioned coordinates
    # u = s * r with s = max(phiZ, 1), run in stages of geometrically
    # growing length; each stage's step is constant and the next stage
    # restarts from the projected average of the current stage's tail.
    D, T = Z.shape
    E = e0.shape[0]
    zz = np.empty((D, T), np.bool_)
    uninf = np.empty((D, T), np.bool_)
    zeff = np.empty((D, T))
    s = np.empty((D, T))
    wq = np.empty((D, T))
    for d in range(D):
        for t in range(T):
            zz[d, t] = (Z[d, t] == 0.0) and (phiZ[d, t] == 0.0)
            zeff[d, t] = max(Z[d, t], 0.0)
            uninf[d, t] = pinned and (phiZ[d, t] <= 0.0) and not zz[d, t]
            s[d, t] = max(phiZ[d, t], 1.0)
            wq[d, t] = phiZ[d, t] / s[d, t]

    def _proj(U, O):
        # nearest point of {r >= 0, w r + o >= 0} per entry (two candidates:
        # the o-axis and the boundary ray o = -w u), exact in 2-D
        for d in range(D):
            for t in range(T):
                if zz[d, t]:
                    U[d, t] = 0.0
                    O[d, t] = 0.0
                    continue
                if pinned:
                    O[d, t] = 0.0
                    if U[d, t] < 0.0:
                        U[d, t] = 0.0
                    continue
                w = wq[d, t]
                u = U[d, t]
                o = O[d, t]
                if u >= 0.0 and w * u + o >= 0.0:
                    continue
                c1 = o if o > 0.0 else 0.0
                c2 = (u - w * o) / (1.0 + w * w)
                if c2 < 0.0:
                    c2 = 0.0
                d1 = u * u + (o - c1) * (o - c1)
                d2 = (u - c2) * (u - c2) + (o + w * c2) * (o + w * c2)
                if d1 <= d2:
                    U[d, t] = 0.0
                    O[d, t] = c1
                else:
                    U[d, t] = c2
                    O[d, t] = -w * c2

    def _obj(U, O):
        v = 0.0
        for d in range(D):
            for t in range(T):
                if zz[d, t] or uninf[d, t]:
                    continue
                p = U[d, t] * wq[d, t] + O[d, t]
                z = zeff[d, t]
                if z > 0.0:
                    if p <= 0.0:
                        return np.inf
                    v += z * np.log(z / p) + p - z
                else:
                    if p < 0.0:
                        return np.inf
                    v += p
        for d in range(D):
            for t in range(1, T - 1):
                v += lt * abs(
                    0.5 * U[d, t - 1] / s[d, t - 1]
                    - U[d, t] / s[d, t]
                    + 0.5 * U[d, t + 1] / s[d, t + 1]
                )
        for k in range(E):
            for t in range(T):
                v += ls * abs(U[e0[k], t] / s[e0[k], t] - U[e1[k], t] / s[e1[k], t])
        if not pinned:
            for d in range(D):
                for t in range(T):
                    v += lo * abs(O[d, t])
        return v

    U = R0 * s
    O = O0.copy()
    _proj(U, O)
    best = _obj(U, O)
    bU = U.copy()
    bO = O.copy()
    gU = np.empty((D, T))
    gO = np.empty((D, T))
    aU = np.empty((D, T))
    aO = np.empty((D, T))
    c = c0
    n = n0
    used = 0
    while used < budget:
        nrun = min(n, budget - used)
        k0 = int(nrun * (1.0 - tail))
        for d in range(D):
            for t in range(T):
                aU[d, t] = 0.0
                aO[d, t] = 0.0
        cnt = 0
        for it in range(nrun):
            used += 1
            f = _obj(U, O)
            if f < best:
                best = f
                for d in range(D):
                    for t in range(T):
                        bU[d, t] = U[d, t]
                        bO[d, t] = O[d, t]
            if not np.isfinite(f):
                # infeasible for the KL domain: back off toward the best
                for d in range(D):
                    for t in range(T):
                        U[d, t] = 0.5 * (U[d, t] + bU[d, t])
                        O[d, t] = 0.5 * (O[d, t] + bO[d, t])
                continue
            if it >= k0:
                cnt += 1
                for d in range(D):
                    for t in range(T):
                        aU[d, t] += U[d, t]
                        aO[d, t] += O[d, t]
            for d in range(D):
                for t in range(T):
                    gU[d, t] = 0.0
                    gO[d, t] = 0.0
            for d in range(D):
                for t in range(T):
                    if zz[d, t] or uninf[d, t]:
                        continue
                    p = U[d, t] * wq[d, t] + O[d, t]
                    z = zeff[d, t]
                    gp = (1.0 - z / p) if z > 0.0 else 1.0
                    gU[d, t] += gp * wq[d, t]
                    if not pinned:
                        gO[d, t] += gp
                        gO[d, t] += lo * (1.0 if O[d, t] > 0 else (-1.0 if O[d, t] < 0 else 0.0))
            for d in range(D):
                for t in range(1, T - 1):
                    v2 = (
                        0.5 * U[d, t - 1] / s[d, t - 1]
                        - U[d, t] / s[d, t]
                        + 0.5 * U[d, t + 1] / s[d, t + 1]
                    )
                    sg = lt * (1.0 if v2 > 0 else (-1.0 if v2 < 0 else 0.0))
                    gU[d, t - 1] += 0.5 * sg / s[d, t - 1]
                    gU[d, t] -= sg / s[d, t]
                    gU[d, t + 1] += 0.5 * sg / s[d, t + 1]
            for kk in range(E):
                for t in range(T):
                    v2 = U[e0[kk], t] / s[e0[kk], t] - U[e1[kk], t] / s[e1[kk], t]
                    sg = ls * (1.0 if v2 > 0 else (-1.0 if v2 < 0 else 0.0))
                    gU[e0[kk], t] += sg / s[e0[kk], t]
                    gU[e1[kk], t] -= sg / s[e1[kk], t]
            gn = 0.0
            for d in range(D):
                for t in range(T):
                    gn += gU[d, t] ** 2 + gO[d, t] ** 2
            gn = np.sqrt(gn)
            if gn < 1e-30:
                # a zero subgradient certifies optimality: stop the solve
                used = budget
                break
            st = c / gn
            for d in range(D):
                for t in range(T):
                    U[d, t] -= st * gU[d, t]
                    O[d, t] -= st * gO[d, t]
            _proj(U, O)
        if cnt > 0:
            for d in range(D):
                for t in range(T):
                    aU[d, t] /= cnt
                    aO[d, t] /= cnt
            _proj(aU, aO)
            fa = _obj(aU, aO)
            if fa < best:
                best = fa
                for d in range(D):
                    for t in range(T):
                        bU[d, t] = aU[d, t]
                        bO[d, t] = aO[d, t]
            for d in range(D):
                for t in range(T):
                    U[d, t] = aU[d, t]
                    O[d, t] = aO[d, t]
        c *= shrink
        # stage lengths never need to exceed the remaining budget; the cap
        # also keeps the geometric growth inside the int64 range
        n = min(int(n * grow), budget)
    return bU / s, bO, best, used


def _oracle_warm_start(Z, phiZ, pinned):
    """Running-median smoothing of the per-entry MLE, plus outlier seeding."""
    D, T = Z.shape
    zeff = np.maximum(Z, 0.0)
    R0 = np.ones((D, T))
    m = phiZ > 0
    R0[m] = zeff[m] / phiZ[m]
    Rs = R0.copy()
    for d in range(D):
        for t in range(T):
            lo = max(0, t - 2)
            hi = min(T, t + 3)
            Rs[d, t] = np.median(R0[d, lo:hi])
    O0 = np.zeros((D, T))
    if not pinned:
        seedable = (zeff > 0) & (phiZ <= 0)
        O0[seedable] = zeff[seedable]
    return Rs, O0


def oracle_solve(Z, phi, graph, hyper, budget=None):
    """Brute-force reference minimizer for tiny instances.

    Projected subgradient descent with a diminishing (geometric) step
    schedule and per-entry feasibility projection; independent of the
    primal-dual machinery.  Budget exhaustion is the normal termination.
    The default budget scales with the variable count and the temporal
    penalty weight (heavier smoothing flattens the objective and needs a
    longer averaging window), floored at 1e6 iterations.

    Parameters
    ----------
    Z : CountMatrix or ndarray, D <= 3, T <= 15
    phi : SerialInterval
    graph : EpiGraph or None
    hyper : Hyperparameters
    budget : int, optional
        Total subgradient iterations, >= 1e6.

    Returns
    -------
    (R, O, objective)
    """
    values = Z.values if isinstance(Z, CountMatrix) else np.asarray(Z, dtype=float)
    D, T = values.shape
    if D > ORACLE_MAX_D or T > ORACLE_MAX_T:
        raise ParameterError(
            "oracle handles at most %d x %d instances" % (ORACLE_MAX_D, ORACLE_MAX_T)
        )
    if not (hyper.lambda_t > 0):
        raise ParameterError("lambda_t must be positive")
    nvar = 2 * D * T
    weight = max(1.0, hyper.lambda_t)
    if budget is None:
        budget = int(min(250_000 * nvar * weight, _MAX_BUDGET))
        budget = max(budget, _MIN_BUDGET)
    elif budget < _MIN_BUDGET:
        raise ParameterError("oracle budget must be at least %d" % _MIN_BUDGET)
    n0 = int(1400 * nvar * weight)

    phiZ = convolve_past(values, phi)
    pinned = hyper.pinned
    lam_o = 0.0 if pinned else hyper.lambda_o
    if graph is not None and graph.num_edges:
        if graph.num_vertices != D:
            raise DataError("graph vertex count does not match territory count")
        e0 = graph.edge_tail.astype(np.int64)
        e1 = graph.edge_head.astype(np.int64)
        lam_s = hyper.lambda_s
    else:
        e0 = np.empty(0, dtype=np.int64)
        e1 = np.empty(0, dtype=np.int64)
        lam_s = 0.0
    R0, O0 = _oracle_warm_start(values, phiZ, pinned)
    R, O, best, _ = _rsg(
        values,
        phiZ,
        e0,
        e1,
        float(hyper.lambda_t),
        float(lam_s),
        float(lam_o),
        bool(pinned),
        R0,
        O0,
        int(budget),
        n0,
        _STEP0,
        _STAGE_GROW,
        _STEP_SHRINK,
        _TAIL_FRACTION,
    )
    return R, O, float(best)
