"""Conditional densities and weighted M-step solvers for each outcome family.

Every solver takes observation weights ``w_i = 1 - m_hat_i`` (the posterior
probability that pair ``i`` is a correct match) and returns new parameters.
With ``w = 1`` each reduces to the usual estimator: OLS, GLM maximum
likelihood, Cox partial likelihood, sample covariance, cell proportions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln

from .marginals import LOG_DENSITY_FLOOR, HazardMarginal

LINEAR_FAMILIES = ("gaussian", "poisson", "logistic", "gamma")
GLM_FAMILIES = ("poisson", "logistic", "gamma")
ETA_CLAMP = 700.0
LOGISTIC_ETA_MAX = 30.0
COX_BETA_MAX = 30.0


class FamilyError(ValueError):
    pass


class RankDeficiencyError(FamilyError):
    def __init__(self, msg, columns):
        super().__init__(msg)
        self.columns = list(columns)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianParams:
    beta: np.ndarray
    sigma2: float
    family = "gaussian"


@dataclass(frozen=True, eq=False)
class GLMParams:
    """Poisson / logistic (canonical link) or Gamma (log link, shape 1/sigma)."""

    family: str
    beta: np.ndarray
    sigma: float = 1.0
    separated: bool = False


@dataclass(frozen=True, eq=False)
class CoxParams:
    """Regression coefficients and Breslow baseline hazard jumps at event times."""

    beta: np.ndarray
    times: np.ndarray
    jumps: np.ndarray
    monotone: bool = False
    family = "cox"

    @property
    def baseline(self):
        return HazardMarginal(self.times, self.jumps)


@dataclass(frozen=True, eq=False)
class MVNormalParams:
    """Joint covariance of stacked ``(x, y)`` and the block-diagonal covariance
    used for mismatched pairs. ``px`` is the dimension of ``x``."""

    sigma: np.ndarray
    gamma_cov: np.ndarray
    px: int
    family = "mvnormal"


@dataclass(frozen=True, eq=False)
class ContingencyParams:
    """Joint cell probabilities and the row/column margins of the
    independence component (fitted separately, not tied to ``pi``)."""

    pi: np.ndarray
    psi_row: np.ndarray
    psi_col: np.ndarray
    family = "contingency"


def _floor_log(v):
    return np.maximum(v, LOG_DENSITY_FLOOR)


def linear_terms(fp, eta, y):
    """Log density and its first two derivatives in the linear predictor.

    Returns
    -------
    logphi, s1, s2 : ndarray
        ``log phi(y | eta)``, ``d log phi / d eta`` and ``d2 log phi / d eta2``.
        Derivatives of ``phi`` itself are ``phi' = phi*s1`` and
        ``phi'' = phi*(s1**2 + s2)``.
    """
    fam = fp.family
    if fam == "gaussian":
        s2v = fp.sigma2
        r = y - eta
        logphi = -0.5 * np.log(2 * np.pi * s2v) - 0.5 * r * r / s2v
        return logphi, r / s2v, np.full_like(r, -1.0 / s2v)
    if fam == "poisson":
        e = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        mu = np.exp(e)
        return y * e - mu - gammaln(y + 1), y - mu, -mu
    if fam == "logistic":
        p = expit(eta)
        return y * eta - np.logaddexp(0.0, eta), y - p, -p * (1 - p)
    if fam == "gamma":
        a = 1.0 / fp.sigma
        ratio = y * np.exp(-np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
        logphi = a * np.log(a) - a * eta + (a - 1) * np.log(y) - a * ratio - gammaln(a)
        return logphi, a * (ratio - 1), -a * ratio
    raise FamilyError(f"family {fam!r} has no single linear predictor")


def _x(ds):
    return ds.x


def log_phi(fp, ds):
    """Per-record ``log phi_i``, floored at the log density floor."""
    fam = fp.family
    if fam != ds.family:
        raise FamilyError(f"parameters for {fam!r} applied to a {ds.family!r} dataset")
    if fam in LINEAR_FAMILIES:
        return _floor_log(linear_terms(fp, ds.x @ fp.beta, ds.y)[0])
    if fam == "cox":
        return cox_log_density(fp, ds)
    if fam == "mvnormal":
        return _floor_log(_mvn_logpdf(_stack(ds), fp.sigma))
    if fam == "contingency":
        with np.errstate(divide="ignore"):
            return _floor_log(np.log(fp.pi[ds.x - 1, ds.y - 1]))
    raise FamilyError(f"unknown family {fam!r}")


def cox_log_density(fp, ds, smooth=True):
    """``delta log(lambda0(y) e^eta) - Lambda0(y) e^eta`` per record.

    ``smooth=False`` uses the raw Breslow jump at ``y`` as the hazard, which is
    the quantity the M-step maximises; the default uses the smoothed hazard
    of :class:`~linkfit.marginals.HazardMarginal` for density evaluation.
    """
    eta = np.clip(ds.x @ fp.beta, -ETA_CLAMP, ETA_CLAMP)
    base = fp.baseline
    if smooth:
        lam0 = base.hazard(ds.y)
    else:
        k = np.minimum(np.searchsorted(fp.times, ds.y), fp.times.size - 1)
        lam0 = np.where(fp.times[k] == ds.y, fp.jumps[k], 0.0)
    with np.errstate(divide="ignore"):
        loglam = np.where(ds.event == 1, np.log(lam0) + eta, 0.0)
    return _floor_log(loglam - np.exp(eta) * base.cumhaz(ds.y))


def phi_eval(fp, ds, i=None):
    """Conditional density ``phi(y_i | x_i)`` (joint density for unsupervised
    families), floored at the density floor. ``i`` selects records."""
    out = np.exp(log_phi(fp, ds))
    return out if i is None else out[i]


def log_independent_density(fp, ds):
    """``log f(x_i) f(y_i)`` for the unsupervised families."""
    if fp.family == "mvnormal":
        return _floor_log(_mvn_logpdf(_stack(ds), fp.gamma_cov))
    if fp.family == "contingency":
        with np.errstate(divide="ignore"):
            v = np.log(fp.psi_row[ds.x - 1]) + np.log(fp.psi_col[ds.y - 1])
        return _floor_log(v)
    raise FamilyError(f"{fp.family!r} uses a plug-in marginal instead")


def conditional_density_matrix(fp, X, y):
    """``phi(y_j | x_i)`` for all pairs, shape ``(len(X), len(y))``."""
    eta = np.asarray(X) @ fp.beta
    logphi = linear_terms(fp, eta[:, None], np.asarray(y)[None, :])[0]
    return np.exp(logphi)


def _stack(ds):
    return np.column_stack([ds.x, ds.y])


def _mvn_logpdf(v, cov):
    c, low = linalg.cho_factor(cov, lower=True)
    sol = linalg.cho_solve((c, low), v.T)
    logdet = 2 * np.sum(np.log(np.diag(c)))
    d = v.shape[1]
    return -0.5 * (d * np.log(2 * np.pi) + logdet + np.sum(v.T * sol, axis=0))


# ---------------------------------------------------------------- M-steps

def _check_weights(w, n):
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise FamilyError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise FamilyError("weights must be finite and nonnegative")
    return w


def _check_rank(X, w, names=None):
    Xw = X * np.sqrt(w)[:, None]
    _, r, piv = linalg.qr(Xw, mode="economic", pivoting=True)
    d = np.abs(np.diag(r)) if r.size else np.zeros(0)
    tol = max(Xw.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0)
    rank = int(np.sum(d > tol))
    if rank < X.shape[1]:
        bad = sorted(piv[rank:].tolist())
        labels = [names[j] for j in bad] if names else bad
        raise RankDeficiencyError(f"weighted design is rank deficient; dependent columns: {labels}", bad)


def mstep_gaussian(ds, w):
    """Weighted least squares for ``beta`` and weighted residual variance."""
    X, y = ds.x, ds.y
    w = _check_weights(w, ds.n)
    if w.sum() <= X.shape[1]:
        raise FamilyError("total weight must exceed the number of coefficients")
    _check_rank(X, w, ds.x_names)
    sw = np.sqrt(w)
    beta = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
    r = y - X @ beta
    return GaussianParams(beta, float(np.sum(w * r * r) / w.sum()))


def _glm_start(family, X, y, w):
    if family == "poisson":
        t = np.log(y + 0.5)
    elif family == "logistic":
        t = np.log((y + 0.5) / (1.5 - y))
    else:
        t = np.log(y)
    sw = np.sqrt(w)
    return np.linalg.lstsq(X * sw[:, None], t * sw, rcond=None)[0]


def _glm_beta_nll(family, beta, X, y, w):
    eta = X @ beta
    if family == "poisson":
        e = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        return float(np.sum(w * (np.exp(e) - y * e)))
    if family == "logistic":
        return float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))
    e = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    return float(np.sum(w * (e + y * np.exp(-e))))


def _newton_minimize(fun, grad_hess, beta, max_iter=100, tol=1e-10, max_halvings=30, name="IRLS"):
    """Damped Newton: only steps that do not increase ``fun`` are accepted."""
    obj = fun(beta)
    for it in range(max_iter):
        g, H = grad_hess(beta)
        step = np.linalg.lstsq(H, g, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            raise DivergenceError(f"{name}: non-finite Newton step at iteration {it}")
        if np.max(np.abs(step), initial=0.0) == 0.0:
            return beta, it
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta - t * step
            c_obj = fun(cand)
            if np.isfinite(c_obj) and c_obj <= obj:
                break
            t *= 0.5
        else:
            # no decrease possible: stationary to rounding if the gradient is small
            scale = 1.0 + np.abs(obj)
            if np.abs(g @ step) <= 1e-8 * scale:
                return beta, it
            raise DivergenceError(f"{name}: objective not decreased after {max_halvings} step halvings")
        delta = np.max(np.abs(cand - beta))
        beta, obj = cand, c_obj
        if delta <= tol * (1.0 + np.max(np.abs(beta))):
            return beta, it + 1
    return beta, max_iter


def _gamma_shape_nll(a, mu, y, w):
    return -float(np.sum(w * (a * np.log(a / mu) + (a - 1) * np.log(y) - a * y / mu - gammaln(a))))


def golden_section(f, lo, hi, tol=1e-10, max_iter=200):
    """Minimise a unimodal ``f`` on ``[lo, hi]``."""
    g = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * (1 + abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def mstep_glm(family, ds, w, init=None):
    """Weighted GLM fit by damped Newton (IRLS for canonical links).

    For the Gamma family the dispersion ``sigma`` is then updated by a
    golden-section search over ``log sigma`` in ``[-12, 12]`` with ``beta``
    held fixed.
    """
    if family not in GLM_FAMILIES:
        raise FamilyError(f"unknown GLM family {family!r}")
    X, y = ds.x, ds.y
    w = _check_weights(w, ds.n)
    if w.sum() <= X.shape[1]:
        raise FamilyError("total weight must exceed the number of coefficients")
    _check_rank(X, w, ds.x_names)
    beta0 = init.beta if init is not None else _glm_start(family, X, y, w)

    def grad_hess(b):
        eta = X @ b
        if family == "poisson":
            mu = np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
            s1, s2 = y - mu, -mu
        elif family == "logistic":
            p = expit(eta)
            s1, s2 = y - p, -p * (1 - p)
        else:
            ratio = y * np.exp(-np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
            s1, s2 = ratio - 1, -ratio
        return -X.T @ (w * s1), X.T @ (X * (-w * s2)[:, None])

    beta, _ = _newton_minimize(lambda b: _glm_beta_nll(family, b, X, y, w), grad_hess,
                               np.asarray(beta0, dtype=float), name=f"{family} IRLS")
    separated = False
    if family == "logistic":
        eta = X @ beta
        if np.max(np.abs(eta[w > 0]), initial=0.0) > LOGISTIC_ETA_MAX:
            separated = True
    sigma = 1.0
    if family == "gamma":
        mu = np.exp(np.clip(X @ beta, -ETA_CLAMP, ETA_CLAMP))
        f = lambda ls: _gamma_shape_nll(np.exp(-ls), mu, y, w)
        ls, fbest = golden_section(f, -12.0, 12.0)
        if init is not None and f(np.log(init.sigma)) < fbest:
            ls = np.log(init.sigma)
        sigma = float(np.exp(ls))
    return GLMParams(family, beta, sigma, separated)


def _cox_risk_sums(X, t, w, eta):
    """Weighted risk-set sums ``S0, S1, S2`` over ``{j : t_j >= t_i}``."""
    order = np.argsort(t, kind="stable")
    ts = t[order]
    a = (w * np.exp(eta))[order]
    Xs = X[order]
    s0 = np.cumsum(a[::-1])[::-1]
    s1 = np.cumsum((a[:, None] * Xs)[::-1], axis=0)[::-1]
    s2 = np.cumsum((a[:, None, None] * Xs[:, :, None] * Xs[:, None, :])[::-1], axis=0)[::-1]
    pos = np.searchsorted(ts, t, side="left")
    return s0[pos], s1[pos], s2[pos]


def cox_partial_nll(beta, ds, w):
    """Weighted negative log partial likelihood (Breslow ties)."""
    X, t, d = ds.x, ds.y, ds.event
    eta = np.clip(X @ beta, -ETA_CLAMP, ETA_CLAMP)
    s0, _, _ = _cox_risk_sums(X, t, w, eta)
    ev = (d == 1) & (w > 0)
    return -float(np.sum(w[ev] * (eta[ev] - np.log(s0[ev]))))


def breslow(ds, w, beta):
    """Weighted Breslow baseline hazard jumps at the distinct event times."""
    t, d = ds.y, ds.event
    eta = np.clip(ds.x @ beta, -ETA_CLAMP, ETA_CLAMP)
    times = np.unique(t[d == 1])
    ts = np.sort(t)
    a = (w * np.exp(eta))[np.argsort(t, kind="stable")]
    s0 = np.cumsum(a[::-1])[::-1]
    risk = s0[np.searchsorted(ts, times, side="left")]
    num = np.array([np.sum(w[(t == u) & (d == 1)]) for u in times])
    with np.errstate(invalid="ignore", divide="ignore"):
        jumps = np.where(risk > 0, num / risk, 0.0)
    return times, jumps


def mstep_cox(ds, w, init=None):
    """Weighted Cox partial likelihood (Newton) followed by weighted Breslow."""
    if ds.event is None:
        raise FamilyError("cox fit needs event indicators")
    w = _check_weights(w, ds.n)
    X, t, d = ds.x, ds.y, ds.event
    if not np.any((d == 1) & (w > 0)):
        raise FamilyError("no event carries positive weight")
    beta0 = np.zeros(X.shape[1]) if init is None else init.beta
    ev = (d == 1)

    def grad_hess(b):
        eta = np.clip(X @ b, -ETA_CLAMP, ETA_CLAMP)
        s0, s1, s2 = _cox_risk_sums(X, t, w, eta)
        use = ev & (w > 0)
        we = w[use][:, None]
        m1 = s1[use] / s0[use][:, None]
        g = -np.sum(we * (X[use] - m1), axis=0)
        H = np.sum(we[:, :, None] * (s2[use] / s0[use][:, None, None] - m1[:, :, None] * m1[:, None, :]), axis=0)
        return g, H

    beta, _ = _newton_minimize(lambda b: cox_partial_nll(b, ds, w), grad_hess,
                               np.asarray(beta0, dtype=float), name="Cox Newton")
    monotone = bool(np.max(np.abs(beta), initial=0.0) > COX_BETA_MAX)
    if monotone:
        beta = np.clip(beta, -COX_BETA_MAX, COX_BETA_MAX)
    times, jumps = breslow(ds, w, beta)
    return CoxParams(beta, times, jumps, monotone)


def _block_diag(S, px):
    G = np.zeros_like(S)
    G[:px, :px] = S[:px, :px]
    G[px:, px:] = S[px:, px:]
    return G


def _checked_cov(S, what):
    try:
        linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError:
        raise FamilyError(f"{what} moment matrix is singular") from None
    return S


def mstep_mvnormal(ds, w):
    """Closed-form updates for the joint and block-diagonal covariances.

    ``Sigma = S / sum(w)`` with ``S`` the ``w``-weighted second moments of the
    stacked ``(x, y)``; ``Gamma`` the ``(1 - w)``-weighted block-diagonal
    second moments divided by ``sum(1 - w)``. A component with zero total
    weight borrows the other's estimate so that naive (``w = 1``) fits work.
    """
    w = _check_weights(w, ds.n)
    if np.any(w > 1):
        raise FamilyError("weights must lie in [0, 1]")
    v = _stack(ds)
    px = ds.x.shape[1]
    m = 1.0 - w
    sw, sm = w.sum(), m.sum()
    sigma = _checked_cov((v * w[:, None]).T @ v / sw, "weighted") if sw > 0 else None
    gamma_cov = _checked_cov(_block_diag((v * m[:, None]).T @ v, px) / sm, "mismatch-weighted") if sm > 0 else None
    if sigma is None and gamma_cov is None:
        raise FamilyError("no weight on either component")
    if sigma is None:
        sigma = gamma_cov.copy()
    if gamma_cov is None:
        gamma_cov = _block_diag(sigma, px)
    return MVNormalParams(sigma, gamma_cov, px)


def contingency_cells(ds, values):
    K, L = ds.n_categories
    out = np.zeros((K, L))
    np.add.at(out, (ds.x - 1, ds.y - 1), values)
    return out


def mstep_contingency(ds, w):
    """Saturated fit to ``w``-weighted cells and independence fit to the
    ``(1 - w)``-weighted cells, each normalised separately."""
    w = _check_weights(w, ds.n)
    correct = contingency_cells(ds, w)
    mis = contingency_cells(ds, 1.0 - w)
    tc, tm = correct.sum(), mis.sum()
    if tc <= 0 and tm <= 0:
        raise FamilyError("no weight on either component")
    pi = correct / tc if tc > 0 else None
    if tm > 0:
        psi_row = mis.sum(axis=1) / tm
        psi_col = mis.sum(axis=0) / tm
    else:
        psi_row, psi_col = pi.sum(axis=1), pi.sum(axis=0)
    if pi is None:
        pi = np.outer(psi_row, psi_col)
    return ContingencyParams(pi, psi_row, psi_col)


def mstep(fp_prev, ds, w):
    """Dispatch to the family's weighted M-step, warm-started at ``fp_prev``."""
    fam = ds.family
    if fam == "gaussian":
        return mstep_gaussian(ds, w)
    if fam in GLM_FAMILIES:
        return mstep_glm(fam, ds, w, init=fp_prev)
    if fam == "cox":
        return mstep_cox(ds, w, init=fp_prev)
    if fam == "mvnormal":
        return mstep_mvnormal(ds, w)
    if fam == "contingency":
        return mstep_contingency(ds, w)
    raise FamilyError(f"unknown family {fam!r}")


def naive_fit(ds):
    """Classical fit ignoring mismatch error (all weights one)."""
    return mstep(None, ds, np.ones(ds.n))


def weighted_nll(fp, ds, w):
    """The ``theta``-part of the expected complete-data negative log-likelihood.

    For the unsupervised families the independence component is included,
    since its parameters are updated in the same M-step.
    """
    w = np.asarray(w, dtype=float)
    logphi = cox_log_density(fp, ds, smooth=False) if fp.family == "cox" else log_phi(fp, ds)
    val = -np.sum(w * logphi)
    if ds.family in ("mvnormal", "contingency"):
        val -= np.sum((1 - w) * log_independent_density(fp, ds))
    return float(val)


def param_vector(fp):
    """Flat vector of the family's finite-dimensional parameters, with names."""
    if fp.family in LINEAR_FAMILIES or fp.family == "cox":
        return np.asarray(fp.beta, dtype=float)
    if fp.family == "mvnormal":
        return np.concatenate([fp.sigma.ravel(), fp.gamma_cov.ravel()])
    return np.concatenate([fp.pi.ravel(), fp.psi_row, fp.psi_col])
