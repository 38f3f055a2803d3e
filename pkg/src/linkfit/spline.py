"""Mismatch-robust penalised-spline regression by Gibbs sampling.

Hierarchical model::

    alpha ~ U(0, 1),  f(sigma2) ~ 1/sigma2,  f(tau2) ~ 1/tau2
    m_i | alpha ~ Bernoulli(alpha)
    beta | tau2 ~ N(0, tau2 S^+)            (improper, rank r)
    y_i | m_i = 0 ~ N(B(x_i)' beta, sigma2),  y_i | m_i = 1 ~ f_y

All full conditionals are standard distributions.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline
from scipy.special import expit

from .marginals import eval_marginal, fit_kde

MIN_CORRECT = 3


class SplineError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SplineModel:
    knots: np.ndarray
    degree: int
    interval: tuple
    penalty: np.ndarray
    rank: int

    @property
    def n_basis(self):
        return self.knots.size - self.degree - 1

    def basis(self, x):
        x = np.asarray(x, dtype=float)
        a, b = self.interval
        if np.any(x < a) or np.any(x > b):
            raise SplineError(f"x values must lie in [{a}, {b}]")
        return BSpline.design_matrix(x, self.knots, self.degree).toarray()


def difference_penalty(d, order=2):
    D = np.diff(np.eye(d), n=order, axis=0)
    return D.T @ D


def numerical_rank(S):
    ev = np.linalg.eigvalsh(S)
    return int(np.sum(ev > 1e-10 * ev.max()))


def build_spline(x, n_knots=25, interval=None, degree=3):
    """Cubic B-spline basis on ``n_knots`` equi-spaced knots (boundaries
    included) with a second-order difference penalty on the coefficients."""
    if n_knots < 2:
        raise SplineError("need at least two knots")
    x = np.asarray(x, dtype=float)
    a, b = (float(x.min()), float(x.max())) if interval is None else map(float, interval)
    if not b > a:
        raise SplineError("interval must have positive length")
    if np.any(x < a) or np.any(x > b):
        raise SplineError(f"x values must lie in [{a}, {b}]")
    inner = np.linspace(a, b, n_knots)
    t = np.concatenate([np.full(degree, a), inner, np.full(degree, b)])
    d = t.size - degree - 1
    S = difference_penalty(d)
    return SplineModel(t, degree, (a, b), S, numerical_rank(S))


@dataclass
class GibbsState:
    m: np.ndarray
    alpha: float
    sigma2: float
    tau2: float
    beta: np.ndarray


@dataclass
class PosteriorDraws:
    alpha: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    beta: np.ndarray
    burn_in: int
    thin: int
    seed: int
    m: np.ndarray | None = None
    grid: np.ndarray | None = None
    curve_mean: np.ndarray | None = None
    curve_lower: np.ndarray | None = None
    curve_upper: np.ndarray | None = None
    jitter_count: int = 0
    m_rejections: int = 0
    sigma_fixed: bool = False

    @property
    def smoothing(self):
        return self.sigma2 / self.tau2

    def summary(self):
        def s(v):
            lo, hi = np.percentile(v, [2.5, 97.5])
            return {"mean": float(np.mean(v)), "lower": float(lo), "upper": float(hi)}

        return {
            "alpha": s(self.alpha), "sigma2": s(self.sigma2), "tau2": s(self.tau2),
            "sigma2_over_tau2": s(self.smoothing), "n_draws": int(self.alpha.size),
            "burn_in": self.burn_in, "thin": self.thin, "seed": self.seed,
            "jitter_count": self.jitter_count, "m_rejections": self.m_rejections,
            "sigma_fixed": self.sigma_fixed,
        }

    def curve(self):
        return {"x": self.grid.tolist(), "mean": self.curve_mean.tolist(),
                "lower": self.curve_lower.tolist(), "upper": self.curve_upper.tolist()}


def sample_m(state, y, B, fy, rng):
    """``m_i ~ Bernoulli(alpha f_y / (alpha f_y + (1 - alpha) phi_i))``."""
    mu = B @ state.beta
    logphi = -0.5 * np.log(2 * np.pi * state.sigma2) - 0.5 * (y - mu) ** 2 / state.sigma2
    logit_pi = (np.log(state.alpha) + np.log(fy)) - (np.log1p(-state.alpha) + logphi)
    return rng.random(y.size) < expit(logit_pi)


def sample_alpha(m, rng):
    k = int(np.sum(m))
    return rng.beta(k + 1, m.size - k + 1)


def sample_sigma2(m, y, B, beta, rng):
    keep = ~m
    rss = np.sum((y[keep] - B[keep] @ beta) ** 2)
    return (rss / 2) / rng.gamma(keep.sum() / 2)


def sample_tau2(beta, S, r, rng):
    return (beta @ S @ beta / 2) / rng.gamma(r / 2)


def beta_conditional(m, y, B, S, sigma2, tau2, jitter=0.0):
    """Mean and Cholesky factor of the precision-scaled matrix ``A`` with
    ``beta | . ~ N(A^-1 B'Wy, sigma2 A^-1)``, ``A = B'WB + (sigma2/tau2) S``."""
    keep = ~m
    Bk = B[keep]
    A = Bk.T @ Bk + (sigma2 / tau2) * S
    if jitter:
        A = A + jitter * np.eye(A.shape[0])
    c = linalg.cholesky(A, lower=True)
    mean = linalg.cho_solve((c, True), Bk.T @ y[keep])
    return mean, c


def sample_beta(m, y, B, S, sigma2, tau2, rng):
    """Draw ``beta``; returns ``(beta, jittered)``."""
    jitter = 0.0
    for _ in range(6):
        try:
            mean, c = beta_conditional(m, y, B, S, sigma2, tau2, jitter)
            break
        except linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0 else jitter * 100
    else:
        raise SplineError("beta full conditional is not positive definite")
    z = rng.standard_normal(mean.size)
    return mean + np.sqrt(sigma2) * linalg.solve_triangular(c.T, z, lower=False), jitter > 0


def gibbs_step(state, y, B, spline, fy, rng, update_m=True, sigma2_fixed=None, stats=None):
    """One sweep in the order m, alpha, sigma2, tau2, beta."""
    m = state.m
    if update_m:
        for _ in range(100):
            cand = sample_m(state, y, B, fy, rng)
            if y.size - cand.sum() >= MIN_CORRECT:
                m = cand
                break
            if stats is not None:
                stats["m_rejections"] += 1
    alpha = sample_alpha(m, rng)
    sigma2 = sigma2_fixed if sigma2_fixed is not None else sample_sigma2(m, y, B, state.beta, rng)
    tau2 = sample_tau2(state.beta, spline.penalty, spline.rank, rng)
    beta, jit = sample_beta(m, y, B, spline.penalty, sigma2, tau2, rng)
    if jit and stats is not None:
        stats["jitter_count"] += 1
    return GibbsState(m, alpha, sigma2, tau2, beta)


def _initial_state(y, B, S, m=None):
    n, d = B.shape
    m = np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool)
    A = B.T @ B + S
    beta = np.linalg.solve(A, B.T @ y)
    sigma2 = float(np.mean((y - B @ beta) ** 2)) or 1.0
    tau2 = float(beta @ S @ beta) / max(numerical_rank(S), 1) or 1.0
    return GibbsState(m, 0.1 if m.sum() == 0 else float(m.mean()), sigma2, tau2, beta)


def naive_sigma(y, B):
    """Residual SD of an unpenalised least-squares spline fit."""
    beta = np.linalg.lstsq(B, y, rcond=None)[0]
    return float(np.sqrt(np.mean((y - B @ beta) ** 2)))


def run_gibbs(x, y, spline, iters=10000, burn_in=100, thin=10, seed=0, f_y=None,
              grid=None, sigma_ratio=None, fixed_m=None, keep_m=False):
    """Run a single Gibbs chain.

    Parameters
    ----------
    x, y : array_like
        Predictor and response.
    spline : SplineModel
    iters, burn_in, thin : int
        Total sweeps; the first ``burn_in`` are discarded and every ``thin``-th
        of the rest is kept.
    seed : int
        Seed of the chain's generator; identical seeds give identical draws.
    f_y : fitted marginal, optional
        Defaults to a Gaussian-kernel KDE of ``y`` with Silverman bandwidth.
    grid : array_like, optional
        Points at which to summarise the curve (default 200 points).
    sigma_ratio : float, optional
        Hold ``sigma = sigma_ratio * naive_sigma`` fixed instead of sampling it.
    fixed_m : array_like of bool, optional
        Hold the mismatch indicators fixed (no ``m`` updates).
    """
    if not iters > burn_in >= 0 or thin < 1:
        raise SplineError("need iters > burn_in >= 0 and thin >= 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    B = spline.basis(x)
    if f_y is None:
        f_y = fit_kde(y, kernel="gaussian")
    fy = eval_marginal(f_y, y)
    rng = np.random.default_rng(seed)
    state = _initial_state(y, B, spline.penalty, fixed_m)
    sigma2_fixed = None
    if sigma_ratio is not None:
        sigma2_fixed = (sigma_ratio * naive_sigma(y, B)) ** 2
        state = replace(state, sigma2=sigma2_fixed)
    stats = {"jitter_count": 0, "m_rejections": 0}
    keep = []
    for t in range(1, iters + 1):
        state = gibbs_step(state, y, B, spline, fy, rng, update_m=fixed_m is None,
                           sigma2_fixed=sigma2_fixed, stats=stats)
        if t > burn_in and (t - burn_in) % thin == 0:
            keep.append(state)
    if grid is None:
        grid = np.linspace(*spline.interval, 200)
    grid = np.asarray(grid, dtype=float)
    betas = np.array([s.beta for s in keep])
    curves = spline.basis(grid) @ betas.T
    lo, hi = np.percentile(curves, [2.5, 97.5], axis=1)
    return PosteriorDraws(
        alpha=np.array([s.alpha for s in keep]),
        sigma2=np.array([s.sigma2 for s in keep]),
        tau2=np.array([s.tau2 for s in keep]),
        beta=betas, burn_in=burn_in, thin=thin, seed=seed,
        m=np.array([s.m for s in keep]) if keep_m else None,
        grid=grid, curve_mean=curves.mean(axis=1), curve_lower=lo, curve_upper=hi,
        jitter_count=stats["jitter_count"], m_rejections=stats["m_rejections"],
        sigma_fixed=sigma2_fixed is not None,
    )
