"""Plug-in estimators for the marginal outcome density.

Mismatch error scrambles which ``x`` goes with which ``y`` but leaves the
marginal distribution of ``y`` intact, so ``f_y`` can be estimated once from
the outcome sample and held fixed during EM.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = np.log(DENSITY_FLOOR)
HAZARD_WINDOW = 10


class MarginalError(ValueError):
    pass


def silverman_bandwidth(values):
    """Silverman's rule of thumb, ``0.9 min(sd, IQR/1.34) n^(-1/5)``."""
    v = np.asarray(values, dtype=float)
    n = v.size
    sd = v.std(ddof=1) if n > 1 else 0.0
    iqr = np.subtract(*np.percentile(v, [75, 25])) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    if not spread > 0:
        spread = max(abs(v).max(), 1.0) * 1e-3
    return 0.9 * spread * n ** (-0.2)


@dataclass(frozen=True, eq=False)
class KDE:
    """Kernel density estimate; ``kernel`` is ``"rectangular"`` or ``"gaussian"``."""

    points: np.ndarray
    bandwidth: float
    kernel: str = "rectangular"
    kind = "real"

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        pts, b, n = self.points, self.bandwidth, self.points.size
        if self.kernel == "rectangular":
            hi = np.searchsorted(pts, y + b, side="right")
            lo = np.searchsorted(pts, y - b, side="left")
            return (hi - lo) / (2.0 * b * n)
        u = (y.reshape(-1, 1) - pts[None, :]) / b
        dens = np.exp(-0.5 * u * u).sum(axis=1) / (n * b * np.sqrt(2 * np.pi))
        return dens.reshape(y.shape)


@dataclass(frozen=True, eq=False)
class EmpiricalPMF:
    """Probabilities for categories ``start, start+1, ..., start+L-1``."""

    probs: np.ndarray
    start: int = 1
    kind = "category"

    def pdf(self, y):
        y = np.asarray(y)
        k = np.round(y).astype(np.int64) - self.start
        if np.any(k < 0) or np.any(k >= self.probs.size) or np.any(y != np.round(y)):
            raise MarginalError("category outside the support of the empirical PMF")
        return self.probs[k]


@dataclass(frozen=True, eq=False)
class GaussianMarginal:
    mean: float
    var: float
    kind = "real"

    def pdf(self, y):
        return stats.norm.pdf(y, loc=self.mean, scale=np.sqrt(self.var))


@dataclass(frozen=True, eq=False)
class HazardMarginal:
    """Step cumulative hazard with jumps at the distinct event times.

    The hazard itself is the piecewise-constant function ``jump_k / gap_k`` on
    ``(t_{k-1}, t_k]``, averaged (length-weighted) over the ``window``
    neighbouring intervals on each side. An event time's own interval is left
    out: with weighted jumps, a record's own weight would otherwise feed back
    into its own density and make zero weight self-sustaining. Beyond the
    last event time the hazard is zero.
    """

    times: np.ndarray
    jumps: np.ndarray
    window: int = HAZARD_WINDOW
    kind = "survival"

    def cumhaz(self, t):
        cum = np.concatenate([[0.0], np.cumsum(self.jumps)])
        return cum[np.searchsorted(self.times, t, side="right")]

    def _gaps(self):
        u = self.times
        gaps = np.diff(u, prepend=min(0.0, u[0]))
        if gaps[0] <= 0:
            gaps[0] = gaps[1] if u.size > 1 else 1.0
        return gaps

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        u, K = self.times, self.times.size
        p = np.searchsorted(u, t, side="left")
        hit = (p < K) & (u[np.minimum(p, K - 1)] == t)
        gaps = self._gaps()
        cj = np.concatenate([[0.0], np.cumsum(self.jumps)])
        cg = np.concatenate([[0.0], np.cumsum(gaps)])
        lo = p - self.window
        hi = p + self.window + hit
        shift = np.maximum(-lo, 0)
        lo, hi = lo + shift, hi + shift
        over = np.maximum(hi - K, 0)
        lo, hi = np.maximum(lo - over, 0), hi - over
        own = np.minimum(p, K - 1)
        sj = cj[hi] - cj[lo] - np.where(hit, self.jumps[own], 0.0)
        sg = cg[hi] - cg[lo] - np.where(hit, gaps[own], 0.0)
        # a lone event has no neighbours to borrow from
        alone = sg <= 0
        sj = np.where(alone, self.jumps[own], sj)
        sg = np.where(alone, gaps[own], sg)
        return np.where(t > u[-1], 0.0, sj / sg)

    def pdf(self, y, event):
        event = np.asarray(event)
        lam = np.where(event == 1, self.hazard(y), 1.0)
        return np.exp(-self.cumhaz(y)) * lam


@dataclass(frozen=True, eq=False)
class MixtureOfConditionals:
    """``f_y(y) = (1/n) sum_i phi(y | x_i; theta)`` for a fitted family."""

    params: object
    x: np.ndarray
    kind = "real"

    def pdf(self, y):
        from .families import conditional_density_matrix

        return conditional_density_matrix(self.params, self.x, np.asarray(y, dtype=float)).mean(axis=0)


def fit_kde(values, bandwidth=None, kernel="rectangular"):
    """Kernel density estimate of ``values``.

    With the rectangular kernel the density at ``y`` is
    ``#{i : |y - y_i| <= b} / (2 b n)``. The bandwidth defaults to
    Silverman's rule.
    """
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise MarginalError("cannot fit a KDE to an empty sample")
    if kernel not in ("rectangular", "gaussian"):
        raise MarginalError(f"unknown kernel {kernel!r}")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(v)
    if not bandwidth > 0:
        raise MarginalError("bandwidth must be positive")
    v.setflags(write=False)
    return KDE(v, float(bandwidth), kernel)


def fit_empirical_pmf(values, L, start=1):
    v = np.asarray(values)
    if v.size == 0:
        raise MarginalError("empty sample")
    k = np.round(v).astype(np.int64) - start
    if np.any(v != np.round(v)) or k.min() < 0 or k.max() >= L:
        raise MarginalError(f"categories must lie in {start}..{start + L - 1}")
    probs = np.bincount(k, minlength=L) / v.size
    return EmpiricalPMF(probs, start)


def fit_gaussian_marginal(values):
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise MarginalError("need at least two values")
    var = v.var()
    if not var > 0:
        raise MarginalError("sample variance is zero; Gaussian marginal is degenerate")
    return GaussianMarginal(float(v.mean()), float(var))


def fit_nelson_aalen(times, events):
    """Nelson-Aalen cumulative hazard with tied events pooled per time.

    Returns a :class:`HazardMarginal` whose jump at each distinct event time
    ``t`` is ``d(t) / R(t)`` with ``R(t) = #{j : t_j >= t}``.
    """
    t = np.asarray(times, dtype=float)
    d = np.asarray(events)
    if t.shape != d.shape:
        raise MarginalError("times and events must have equal length")
    if not np.any(d == 1):
        raise MarginalError("Nelson-Aalen needs at least one event")
    ts = np.sort(t)
    uniq = np.unique(t[d == 1])
    at_risk = t.size - np.searchsorted(ts, uniq, side="left")
    n_events = np.array([np.sum((t == u) & (d == 1)) for u in uniq])
    return HazardMarginal(uniq, n_events / at_risk)


def eval_marginal(m, y, event=None):
    """Evaluate a fitted marginal at outcomes ``y``, floored at ``DENSITY_FLOOR``.

    For survival marginals ``event`` is required and the value returned is the
    likelihood contribution ``exp(-Lambda(y)) * lambda(y)**event``.
    """
    if isinstance(m, HazardMarginal):
        if event is None:
            raise MarginalError("survival marginal needs event indicators")
        out = m.pdf(y, event)
    else:
        if event is not None:
            raise MarginalError("event indicators given for a non-survival marginal")
        y = np.asarray(y, dtype=float)
        if m.kind == "real" and not np.all(np.isfinite(y)):
            raise MarginalError("non-finite outcome")
        out = m.pdf(y)
    return np.maximum(out, DENSITY_FLOOR)


def log_marginal(m, y, event=None):
    return np.log(eval_marginal(m, y, event))


def default_marginal(ds, kind=None, bandwidth=None):
    """Fit the default plug-in marginal for a regression dataset.

    ``kind`` is one of ``kde``, ``empirical``, ``gaussian``, ``nelson-aalen``
    or ``None`` for the family default.
    """
    fam = ds.family
    if kind is None:
        kind = {"gaussian": "kde", "poisson": "kde", "gamma": "kde",
                "logistic": "empirical", "cox": "nelson-aalen"}[fam]
    if kind == "kde":
        return fit_kde(ds.y, bandwidth)
    if kind == "empirical":
        y = ds.y.astype(np.int64)
        lo = int(y.min()) if fam != "logistic" else 0
        hi = int(y.max()) if fam != "logistic" else 1
        return fit_empirical_pmf(y, hi - lo + 1, start=lo)
    if kind == "gaussian":
        return fit_gaussian_marginal(ds.y)
    if kind == "nelson-aalen":
        if ds.event is None:
            raise MarginalError("nelson-aalen marginal needs event indicators")
        return fit_nelson_aalen(ds.y, ds.event)
    raise MarginalError(f"unknown marginal kind {kind!r}")
