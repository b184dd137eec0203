"""Count data containers, the penalized KL objective, and baseline estimators.

The observation model treats the daily count ``Z[d, t]`` as Poisson with
intensity ``p = R[d, t] * (Phi Z)[d, t] + O[d, t]``, where ``R`` is the
reproduction number and ``O`` a sparse outlier field absorbing reporting
artifacts.  The estimation objective is

    ``F(R, O) + lambda_T ||D2 R||_1 + i_{>=0}(R) + lambda_S ||G R||_1
      + lambda_O ||O||_1``

with ``F`` the KL data fidelity (indicator of ``{(0, 0)}`` at entries where
``Z = Phi Z = 0``).  ``lambda_O = inf`` encodes the no-outlier configuration
and is implemented by pinning ``O = 0``, never by arithmetic with infinity.
"""

import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .errors import DataError, DomainError, ParameterError
from .operators import d2_apply, graph_apply
from .serial_interval import convolve_past


def default_dates(T, start=date(2020, 1, 22)):
    """Consecutive daily dates for synthetic or unlabeled data."""
    return [start + timedelta(days=t) for t in range(T)]


@dataclass(frozen=True)
class CountMatrix:
    """Labeled D x T matrix of daily counts.

    Raw values are integers (possibly negative: correction artifacts are
    kept as-is); after standardization values are real.  Dates must be
    consecutive calendar days.
    """

    values: np.ndarray
    territories: list
    dates: list

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise DataError("values must be a D x T matrix")
        D, T = v.shape
        if D < 1:
            raise DataError("need at least one territory")
        if len(self.territories) != D:
            raise DataError("territory labels do not match row count")
        if len(self.dates) != T:
            raise DataError("date labels do not match column count")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise DataError("dates must be strictly increasing with daily spacing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def num_territories(self):
        return self.values.shape[0]

    @property
    def num_days(self):
        return self.values.shape[1]

    @classmethod
    def from_values(cls, values, territories=None, dates=None):
        values = np.asarray(values, dtype=float)
        D, T = values.shape
        if territories is None:
            territories = ["T%02d" % (d + 1) for d in range(D)]
        if dates is None:
            dates = default_dates(T)
        return cls(values=values, territories=list(territories), dates=list(dates))


@dataclass(frozen=True)
class Hyperparameters:
    """Regularization weights ``(lambda_T, lambda_S, lambda_O)`` and scales.

    ``lambda_o = math.inf`` pins the outlier field to zero.  ``alpha`` holds
    the per-territory standardization scales (1.0 each when solving in raw
    units); it is bookkeeping for un-scaling outputs and does not enter the
    objective.
    """

    lambda_t: float = 3.5
    lambda_s: float = 0.0
    lambda_o: float = 0.025
    alpha: np.ndarray = None

    def __post_init__(self):
        if self.lambda_t < 0 or self.lambda_s < 0 or self.lambda_o < 0:
            raise ParameterError("regularization weights must be nonnegative")
        if self.alpha is not None:
            a = np.asarray(self.alpha, dtype=float).reshape(-1)
            if np.any(a <= 0):
                raise ParameterError("alpha scales must be positive")
            a.setflags(write=False)
            object.__setattr__(self, "alpha", a)

    @property
    def pinned(self):
        return math.isinf(self.lambda_o)


@dataclass
class Estimate:
    """Solver output with diagnostics.

    ``r_hat >= 0`` and ``p_hat = r_hat * (Phi Z) + o_hat >= 0`` entrywise;
    entries with ``Z = Phi Z = 0`` are exactly zero in both fields.  These
    hold after the final feasibility projection; ``diagnostics`` records how
    far the raw final iterate was from the projected output.
    """

    r_hat: np.ndarray
    o_hat: np.ndarray
    p_hat: np.ndarray
    iterations: int
    objective_trace: np.ndarray
    increment_trace: np.ndarray
    converged: bool
    objective: float
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# objective pieces


def kl_scalar(z, p):
    """Extended-real KL divergence ``d_KL(z | p)`` for scalars.

    ``z ln(z/p) + p - z`` when both are positive, ``p`` when ``z = 0``,
    ``+inf`` when ``z > 0 = p``.  Negative arguments are a domain error.
    """
    if z < 0 or p < 0:
        raise DomainError("kl_scalar arguments must be nonnegative")
    if z == 0:
        return float(p)
    if p == 0:
        return math.inf
    return float(z * math.log(z / p) + p - z)


def _kl_matrix_sum(zeff, p, live):
    """Sum of KL terms over entries flagged by ``live``; inf off-domain."""
    p = np.asarray(p, dtype=float)
    pos = live & (zeff > 0)
    zero = live & (zeff == 0)
    if np.any(p[pos] <= 0) or np.any(p[zero] < 0):
        return math.inf
    total = float(np.sum(p[zero]))
    zp = zeff[pos]
    pp = p[pos]
    total += float(np.sum(zp * np.log(zp / pp) + pp - zp))
    return total


def data_fidelity(R, O, Z, phiZ, drop_uninformative=False):
    """KL data fidelity ``F(R, O | Z, Phi Z)``, extended-real.

    Entries with ``Z = Phi Z = 0`` contribute the indicator of ``(0, 0)``.
    The divergence is evaluated at ``z_eff = max(Z, 0)`` (negative raw
    counts are correction artifacts: they drive the convolution but a
    negative Poisson count has no likelihood).  With ``drop_uninformative``
    (pinned mode), entries where ``Phi Z <= 0 < z_eff`` are excluded: with
    ``O = 0`` they are constant (infinite) in the remaining variables and
    would otherwise poison every objective value.
    """
    R = np.asarray(R, dtype=float)
    O = np.asarray(O, dtype=float)
    Z = np.asarray(Z, dtype=float)
    phiZ = np.asarray(phiZ, dtype=float)
    zeff = np.maximum(Z, 0.0)
    dead = (Z == 0) & (phiZ == 0)
    if np.any(R[dead] != 0) or np.any(O[dead] != 0):
        return math.inf
    live = ~dead
    if drop_uninformative:
        live = live & ~((phiZ <= 0) & (zeff > 0))
    p = R * phiZ + O
    return _kl_matrix_sum(zeff, p, live)


def objective(R, O, Z, phiZ, graph, hyper):
    """Full penalized objective, extended-real (includes the indicators)."""
    R = np.asarray(R, dtype=float)
    O = np.asarray(O, dtype=float)
    if np.any(R < 0):
        return math.inf
    if hyper.pinned:
        if np.any(O != 0):
            return math.inf
        fid = data_fidelity(R, O, Z, phiZ, drop_uninformative=True)
        pen_o = 0.0
    else:
        fid = data_fidelity(R, O, Z, phiZ)
        pen_o = hyper.lambda_o * float(np.abs(O).sum())
    if not math.isfinite(fid):
        return fid
    pen_t = hyper.lambda_t * float(np.abs(d2_apply(R)).sum()) if R.shape[1] >= 3 else 0.0
    pen_s = 0.0
    if graph is not None and graph.num_edges:
        pen_s = hyper.lambda_s * float(np.abs(graph_apply(R, graph)).sum())
    return fid + pen_t + pen_s + pen_o


# ---------------------------------------------------------------------------
# baseline estimators


def mle(Z, phi):
    """Closed-form maximum-likelihood ratio estimate of R.

    ``z_eff / (Phi Z)`` where the denominator is positive, 0 where
    ``Z = Phi Z = 0``, and NaN sentinels where ``Z > 0`` but ``Phi Z = 0``
    (undefined: no history to attribute the counts to).
    """
    values = Z.values if isinstance(Z, CountMatrix) else np.asarray(Z, dtype=float)
    phiZ = convolve_past(values, phi)
    zeff = np.maximum(values, 0.0)
    out = np.zeros_like(phiZ)
    pos = phiZ > 0
    out[pos] = zeff[pos] / phiZ[pos]
    out[(zeff > 0) & (phiZ <= 0)] = np.nan
    return out


def sliding_median_baseline(Z, window=7, k=2.5):
    """Sliding-median outlier filter (the two-step method's first stage).

    Per territory, each sample is compared to the median of a centered
    ``window``-day neighborhood (shrunk near the boundaries); samples
    deviating by more than ``k`` in-window standard deviations are replaced
    by the median.  Returns ``(Z_clean, O_baseline)`` with
    ``Z = Z_clean + O_baseline`` at flagged entries.
    """
    window = int(window)
    if window < 3 or window % 2 == 0:
        raise ParameterError("window must be an odd integer >= 3")
    values = Z.values if isinstance(Z, CountMatrix) else np.asarray(Z, dtype=float)
    D, T = values.shape
    half = window // 2
    clean = values.copy()
    outl = np.zeros_like(values)
    for d in range(D):
        row = values[d]
        for t in range(T):
            lo = max(0, t - half)
            hi = min(T, t + half + 1)
            seg = row[lo:hi]
            m = np.median(seg)
            s = np.std(seg)
            if abs(row[t] - m) > k * s:
                clean[d, t] = m
                outl[d, t] = row[t] - m
    if isinstance(Z, CountMatrix):
        clean = CountMatrix(values=clean, territories=Z.territories, dates=Z.dates)
    return clean, outl


def standardize(Z):
    """Scale each territory by its population standard deviation.

    Returns ``(Z_std, alpha)`` with ``alpha[d] = std(Z[d, :])`` (ddof 0) or
    1.0 for constant rows.  The objective is 1-homogeneous in
    ``(Z, lambda_T, lambda_S)`` so solving on ``Z_std`` with unscaled
    hyperparameters matches the intended per-territory regularization
    strength; outputs are un-scaled by ``alpha`` afterwards.
    """
    values = Z.values if isinstance(Z, CountMatrix) else np.asarray(Z, dtype=float)
    alpha = np.std(values, axis=1)
    alpha[alpha == 0] = 1.0
    scaled = values / alpha[:, None]
    if isinstance(Z, CountMatrix):
        scaled = CountMatrix(values=scaled, territories=Z.territories, dates=Z.dates)
    return scaled, alpha
