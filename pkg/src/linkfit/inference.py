"""Uncertainty quantification and a test for zero mismatch error.

Standard errors come from the sandwich ``H^-1 M H^-1 / n`` of the composite
likelihood, with per-record scores and Hessians in closed form for families
whose conditional density depends on ``x`` only through ``x' beta``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import families as fam
from .em import FitConfig, UNSUPERVISED, _log_f, naive_em_config, pseudo_loglik, resolve_marginal, run_em
from .match import MatchDesign, MatchModel

Z_95 = 1.959963984540054


class InferenceError(RuntimeError):
    pass


@dataclass
class SandwichParts:
    """Per-record scores and the diagonal weights of the closed-form blocks.

    ``scores`` has one row per record, ``[W1_i x_i, W2_i z_i]``; ``bread`` is
    the mean Hessian and ``meat`` the mean outer product of scores.
    """

    scores: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    W4: np.ndarray
    W5: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    names: list

    @property
    def hessian_sum(self):
        return self.bread * self.scores.shape[0]


@dataclass
class CovarianceEstimate:
    names: list
    estimate: np.ndarray
    cov: np.ndarray
    method: str = "sandwich"

    @property
    def se(self):
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0), where=~np.isnan(np.diag(self.cov)),
                       out=np.full(self.cov.shape[0], np.nan))

    @property
    def ci_lower(self):
        return self.estimate - Z_95 * self.se

    @property
    def ci_upper(self):
        return self.estimate + Z_95 * self.se

    def to_dict(self):
        return {
            "method": self.method,
            "parameters": [
                {"name": nm, "estimate": float(e), "se": float(s), "ci_lower": float(lo), "ci_upper": float(hi)}
                for nm, e, s, lo, hi in zip(self.names, self.estimate, self.se, self.ci_lower, self.ci_upper)
            ],
            "covariance": self.cov.tolist(),
        }


@dataclass
class TestResult:
    T: float
    p_value: float
    level: float
    reject: bool
    split_seed: int
    split_indices: tuple
    swap_average: bool = False
    T_parts: tuple = ()

    @property
    def threshold(self):
        return float(np.log(1.0 / self.level))

    def to_dict(self):
        return {
            "T": self.T, "p_value": self.p_value, "level": self.level,
            "threshold": self.threshold, "reject": self.reject,
            "split_seed": self.split_seed, "swap_average": self.swap_average,
            "T_parts": list(self.T_parts),
            "split_indices": [list(map(int, s)) for s in self.split_indices],
        }


def _linear_only(family):
    if family not in fam.LINEAR_FAMILIES:
        raise InferenceError(
            f"closed-form scores are only available for {fam.LINEAR_FAMILIES}; "
            f"use bootstrap_covariance for {family!r}"
        )


def parameter_names(ds, design):
    return list(ds.x_names) + MatchDesign.parse(design).names(ds)


def score_and_hessian(params, mm, ds, marginal, Zd=None, known=None):
    """Scores and Hessian blocks of ``l_i = -log L_i`` in ``(beta, gamma)``.

    Dispersion parameters (Gaussian ``sigma2``, Gamma ``sigma``) are held at
    the values in ``params``. With ``D = f(1-h) + h phi`` the weights are

    * ``W1 = -h phi' / D``, ``W2 = -h' (phi - f) / D``
    * ``W3 = -h phi'' / D + (h phi' / D)^2``
    * ``W4 = -phi' h' / D + h phi' (phi - f) h' / D^2``
    * ``W5 = -h'' (phi - f) / D + ((phi - f) h' / D)^2``

    evaluated through the posterior ``r = h phi / D`` so that tiny densities
    do not underflow.
    """
    _linear_only(ds.family)
    if Zd is None:
        Zd = mm.design.matrix(ds)
    X, y = ds.x, ds.y
    logphi, s1, s2 = fam.linear_terms(params, X @ params.beta, y)
    logphi = np.maximum(logphi, fam.LOG_DENSITY_FLOOR)
    logf = _log_f(params, ds, marginal)
    h, h1, h2 = mm.derivatives(Zd)
    logh, log1mh = mm.log_h(Zd)
    a, b = logphi + logh, logf + log1mh
    r = np.exp(a - np.logaddexp(a, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(h1 != 0, r / h - (1 - r) / (1 - h), 0.0)
        r_over_h = r / h
    if known is not None:
        r = np.where(known, 1.0, r)
        with np.errstate(divide="ignore"):
            c = np.where(known & (h1 != 0), 1.0 / h, c)
        r_over_h = np.where(known, 1.0 / h, r_over_h)

    W1 = -r * s1
    W2 = -h1 * c
    W3 = -r * (s1 * s1 + s2) + (r * s1) ** 2
    W4 = -r_over_h * s1 * h1 + r * s1 * c * h1
    W5 = -h2 * c + (h1 * c) ** 2

    n = ds.n
    scores = np.column_stack([X * W1[:, None], Zd * W2[:, None]])
    Hxx = X.T @ (X * W3[:, None])
    Hxz = X.T @ (Zd * W4[:, None])
    Hzz = Zd.T @ (Zd * W5[:, None])
    H = np.block([[Hxx, Hxz], [Hxz.T, Hzz]])
    M = scores.T @ scores
    names = parameter_names(ds, mm.design)
    return SandwichParts(scores, W1, W2, W3, W4, W5, H / n, M / n, names)


def _sandwich(parts, n):
    """``H^-1 M H^-1 / n``. Coordinates with identically zero score and
    Hessian (a match intercept pinned at the logit clamp) are held fixed and
    get NaN variance."""
    H = parts.bread
    free = np.any(H != 0, axis=1) | np.any(parts.scores != 0, axis=0)
    Hf = H[np.ix_(free, free)]
    cond = np.linalg.cond(Hf) if Hf.size else 1.0
    if not np.isfinite(cond) or cond > 1e14:
        raise InferenceError(f"mean Hessian is singular (condition number {cond:.3g})")
    Hinv = np.linalg.inv(Hf)
    sub = Hinv @ parts.meat[np.ix_(free, free)] @ Hinv / n
    cov = np.full(H.shape, np.nan)
    cov[np.ix_(free, free)] = 0.5 * (sub + sub.T)
    return cov


def sandwich_covariance(fit, ds):
    """Sandwich covariance of ``(beta, gamma)`` at a converged EM fit."""
    known = ds.known_match if fit.config.use_known_matches else None
    parts = score_and_hessian(fit.params, fit.match, ds, fit.marginal, fit.design_matrix, known)
    est = np.concatenate([fit.params.beta, fit.match.gamma])
    return CovarianceEstimate(parts.names, est, _sandwich(parts, ds.n), "sandwich")


def model_covariance(params, ds):
    """Inverse observed information of the classical fit (``h = 1``)."""
    _linear_only(ds.family)
    mm = MatchModel(MatchDesign("none"))
    parts = score_and_hessian(params, mm, ds, None if ds.family in UNSUPERVISED else _dummy_marginal(ds))
    H = parts.hessian_sum
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        raise InferenceError("information matrix is singular") from None
    return CovarianceEstimate(list(ds.x_names), np.asarray(params.beta, float), 0.5 * (cov + cov.T), "model")


class _Unit:
    kind = "real"

    def pdf(self, y):
        return np.ones(np.shape(y))


def _dummy_marginal(ds):
    # f_y drops out when h = 1
    return _Unit()


def naive_sandwich(params, ds):
    """Heteroskedasticity-robust (HC0) sandwich of the classical fit."""
    mm = MatchModel(MatchDesign("none"))
    parts = score_and_hessian(params, mm, ds, _dummy_marginal(ds))
    return CovarianceEstimate(list(ds.x_names), np.asarray(params.beta, float),
                              _sandwich(parts, ds.n), "sandwich")


def bootstrap_covariance(ds, config=None, B=200, seed=0):
    """Nonparametric bootstrap covariance of the fitted parameter vector.

    Resamples records with replacement and refits by EM; works for every
    family. Replicates whose fit fails are dropped.
    """
    config = config or FitConfig()
    base = run_em(ds, config)
    est = np.concatenate([fam.param_vector(base.params), base.match.gamma])
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(B):
        idx = np.sort(rng.integers(0, ds.n, ds.n))
        try:
            f = run_em(ds.subset(idx), config)
        except Exception:
            continue
        v = np.concatenate([fam.param_vector(f.params), f.match.gamma])
        if v.shape == est.shape:
            draws.append(v)
    if len(draws) < 2:
        raise InferenceError("too few successful bootstrap replicates")
    cov = np.cov(np.array(draws), rowvar=False, ddof=1)
    names = _generic_names(ds, base)
    return CovarianceEstimate(names, est, np.atleast_2d(cov), "bootstrap")


def _generic_names(ds, fit):
    p = fit.params
    if ds.family in fam.LINEAR_FAMILIES or ds.family == "cox":
        base = list(ds.x_names)
    elif ds.family == "mvnormal":
        d = p.sigma.shape[0]
        base = [f"Sigma[{i},{j}]" for i in range(d) for j in range(d)]
        base += [f"Gamma[{i},{j}]" for i in range(d) for j in range(d)]
    else:
        K, L = p.pi.shape
        base = [f"pi[{k + 1},{l + 1}]" for k in range(K) for l in range(L)]
        base += [f"psi_row[{k + 1}]" for k in range(K)] + [f"psi_col[{l + 1}]" for l in range(L)]
    return base + fit.match.design.names(ds)


def split_indices(n, seed):
    """Random halves ``(D0, D1)`` of ``range(n)``, each sorted."""
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def _split_statistic(ds, config, d0, d1):
    D0, D1 = ds.subset(d0), ds.subset(d1)
    if ds.block is not None and config.match_design.kind == "block":
        nb = int(ds.block.max()) + 1
        if len(np.unique(ds.block[d0])) < nb or len(np.unique(ds.block[d1])) < nb:
            raise InferenceError("a block is missing from one half of the split")
    # null fit on D0 with h = 1
    null_fit = fam.naive_fit(D0)
    null_ll = float(np.sum(fam.log_phi(null_fit, D0)))
    # full fit (marginal included) on D1 only
    marginal = resolve_marginal(D1, config.marginal, config.bandwidth)
    try:
        full = run_em(D1, config, marginal=marginal)
    except Exception as exc:
        raise InferenceError(f"EM fit on the second half failed: {exc}") from exc
    known = D0.known_match if config.use_known_matches else None
    alt_ll = pseudo_loglik(full.params, full.match, D0, marginal, config.match_design.matrix(D0), known)
    return alt_ll - null_ll


def split_lrt(ds, config=None, level=0.05, split_seed=0, swap_average=False):
    """Split likelihood ratio test of ``H0: h = 1`` (no mismatches).

    ``T = log L0(theta1, gamma1) - log L0~(theta0)`` where ``theta0`` is the
    classical fit on one half and ``(theta1, gamma1)`` the mixture fit on the
    other; the null is rejected when ``T > log(1/level)`` and the p-value is
    ``min(1, exp(-T))``. With ``swap_average`` the halves are also exchanged
    and the two values of ``exp(-T)`` averaged.
    """
    if ds.n < 2:
        raise InferenceError("need at least two records")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    config = config or FitConfig()
    d0, d1 = split_indices(ds.n, split_seed)
    T = _split_statistic(ds, config, d0, d1)
    parts = (T,)
    if swap_average:
        T2 = _split_statistic(ds, config, d1, d0)
        parts = (T, T2)
        e = 0.5 * (np.exp(-min(T, 700.0)) + np.exp(-min(T2, 700.0)))
        T = float(-np.log(e))
    p = float(min(1.0, np.exp(-T)))
    return TestResult(float(T), p, level, bool(T > np.log(1.0 / level)), split_seed,
                      (d0, d1), swap_average, tuple(float(t) for t in parts))


__all__ = [
    "SandwichParts", "CovarianceEstimate", "TestResult", "InferenceError",
    "score_and_hessian", "sandwich_covariance", "model_covariance", "naive_sandwich",
    "bootstrap_covariance", "split_lrt", "split_indices", "naive_em_config",
]
