"""Discretized serial-interval weights and the causal past convolution.

The serial interval is the distribution of the delay between symptom onset
in a primary case and in a secondary case.  It is modeled as a Gamma density
with known shape and rate, discretized to daily weights ``Phi_u`` for lags
``u = 1..tau_phi``.  The intensity driver at day ``t`` is the causal
convolution ``(Phi Z)_t = sum_u Phi_u Z_{t-u}`` with zero padding before the
first observation day.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ParameterError

# Gamma(shape, rate) serial interval for COVID-19 daily counts.
DEFAULT_SHAPE = 1.87
DEFAULT_RATE = 0.28
DEFAULT_TAU_PHI = 25


@dataclass(frozen=True)
class SerialInterval:
    """Discretized serial-interval function.

    Attributes
    ----------
    weights : ndarray, shape (tau_phi,)
        Nonnegative daily weights; ``weights[u-1]`` is the mass at lag ``u``
        days.  Lag 0 is excluded (causality) and the vector sums to 1.
    shape, rate : float
        Parameters of the underlying continuous Gamma density (rate in 1/day).
    """

    weights: np.ndarray
    shape: float
    rate: float

    @property
    def tau_phi(self):
        return len(self.weights)

    def mean_lag(self):
        """Mean of the discretized distribution, in days."""
        u = np.arange(1, self.tau_phi + 1, dtype=float)
        return float(np.sum(u * self.weights))

    def std_lag(self):
        """Standard deviation of the discretized distribution, in days."""
        u = np.arange(1, self.tau_phi + 1, dtype=float)
        m = np.sum(u * self.weights)
        return float(np.sqrt(np.sum((u - m) ** 2 * self.weights)))


def discretize_gamma(shape=DEFAULT_SHAPE, rate=DEFAULT_RATE, tau_phi=DEFAULT_TAU_PHI):
    """Discretize a Gamma(shape, rate) density to daily lag weights.

    The weight at lag ``u`` is the probability mass on the interval
    ``(u-1, u]``, i.e. a difference of the Gamma CDF, which is exactly the
    integral of the density over the unit interval (mass preserving).  After
    truncation at ``tau_phi`` days the weights are renormalized to sum to 1.

    Parameters
    ----------
    shape : float
        Shape parameter, > 0.
    rate : float
        Rate parameter in 1/day, > 0.
    tau_phi : int
        Truncation length in days, >= 1.

    Returns
    -------
    SerialInterval
    """
    if not (shape > 0 and rate > 0):
        raise ParameterError("gamma shape and rate must be positive")
    tau_phi = int(tau_phi)
    if tau_phi < 1:
        raise ParameterError("tau_phi must be a positive integer")
    # regularized lower incomplete gamma = CDF of Gamma(shape, rate) at u
    cdf = special.gammainc(shape, rate * np.arange(tau_phi + 1, dtype=float))
    w = np.diff(cdf)
    w = w / w.sum()
    w.setflags(write=False)
    return SerialInterval(weights=w, shape=float(shape), rate=float(rate))


def convolve_past(Z, phi):
    """Causal convolution of daily counts with the serial interval.

    Entry ``(d, t)`` is ``sum_{u=1..min(t, tau_phi)} Phi_u Z[d, t-u]`` with
    0-based ``t``; days before the first sample contribute zero.  The first
    column is always zero (no history).

    Parameters
    ----------
    Z : ndarray, shape (D, T)
        Daily counts (raw values; negative corrections enter as-is).
    phi : SerialInterval or array_like
        Lag weights, ``phi[u-1]`` at lag ``u``.

    Returns
    -------
    ndarray, shape (D, T)
    """
    w = phi.weights if isinstance(phi, SerialInterval) else np.asarray(phi, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ParameterError("Z must be a D x T matrix")
    D, T = Z.shape
    out = np.zeros((D, T))
    for u in range(1, min(len(w), T - 1) + 1):
        out[:, u:] += w[u - 1] * Z[:, : T - u]
    return out
