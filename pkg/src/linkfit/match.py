"""Logistic model for the probability that a linked pair is a correct match.

``h(z; gamma) = P(m = 0 | z) = expit(z' gamma)``. Linear predictors are
clipped to ``[-LOGIT_CLAMP, LOGIT_CLAMP]`` wherever ``h`` is evaluated, which
keeps fitted coefficients finite when posterior weights touch 0 or 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

LOGIT_CLAMP = 15.0
DESIGN_KINDS = ("intercept", "z", "block", "fixed", "none")


class MatchFitError(RuntimeError):
    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


@dataclass(frozen=True)
class MatchDesign:
    """How match covariates enter ``h``.

    ``intercept``: constant mismatch rate. ``z``: intercept plus the raw match
    covariates. ``block``: one intercept per block. ``fixed``: ``h = 1 - rate``
    with nothing estimated. ``none``: ``h = 1`` (no mismatches; the naive fit).
    """

    kind: str = "intercept"
    rate: float | None = None

    def __post_init__(self):
        if self.kind not in DESIGN_KINDS:
            raise ValueError(f"unknown match design {self.kind!r}")
        if self.kind == "fixed" and not (self.rate is not None and 0 <= self.rate < 1):
            raise ValueError("fixed design needs a mismatch rate in [0, 1)")

    @classmethod
    def parse(cls, spec):
        """Parse ``intercept``, ``z``, ``block``, ``none`` or ``fixed:<rate>``."""
        if isinstance(spec, MatchDesign):
            return spec
        if spec.startswith("fixed:"):
            return cls("fixed", float(spec.split(":", 1)[1]))
        return cls(spec)

    def __str__(self):
        return f"fixed:{self.rate}" if self.kind == "fixed" else self.kind

    @property
    def estimated(self):
        return self.kind in ("intercept", "z", "block")

    def matrix(self, ds):
        """Design matrix for ``gamma``; zero columns for fixed/none designs."""
        n = ds.n
        if self.kind == "intercept":
            return np.ones((n, 1))
        if self.kind == "z":
            return np.column_stack([np.ones(n), ds.z])
        if self.kind == "block":
            if ds.block is None:
                raise ValueError("block design requires block ids on the dataset")
            nb = int(ds.block.max()) + 1
            return (ds.block[:, None] == np.arange(nb)[None, :]).astype(float)
        return np.zeros((n, 0))

    def names(self, ds):
        if self.kind == "intercept":
            return ["gamma:(Intercept)"]
        if self.kind == "z":
            return ["gamma:(Intercept)"] + [f"gamma:{nm}" for nm in ds.z_names]
        if self.kind == "block":
            return [f"gamma:block{b}" for b in range(int(ds.block.max()) + 1)]
        return []


@dataclass(frozen=True, eq=False)
class MatchModel:
    """Fitted match model.

    ``bound`` is an optional upper bound on the average mismatch logit,
    ``mean(Z)' (-gamma) <= bound``.
    """

    design: MatchDesign
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bound: float | None = None
    boundary: bool = False
    constrained_active: bool = False

    def linear_predictor(self, Zd):
        return np.clip(Zd @ self.gamma, -LOGIT_CLAMP, LOGIT_CLAMP)

    def h(self, Zd):
        """Correct-match probabilities for design rows ``Zd``."""
        n = Zd.shape[0]
        if self.design.kind == "none":
            return np.ones(n)
        if self.design.kind == "fixed":
            return np.full(n, 1.0 - self.design.rate)
        return expit(self.linear_predictor(Zd))

    def log_h(self, Zd):
        """``(log h, log(1 - h))``, computed without cancellation."""
        n = Zd.shape[0]
        if self.design.kind == "none":
            return np.zeros(n), np.full(n, -np.inf)
        if self.design.kind == "fixed":
            a = self.design.rate
            return np.full(n, np.log1p(-a)), np.full(n, np.log(a) if a > 0 else -np.inf)
        zeta = self.linear_predictor(Zd)
        return -np.logaddexp(0.0, -zeta), -np.logaddexp(0.0, zeta)

    def derivatives(self, Zd):
        """``h``, ``dh/dzeta`` and ``d2h/dzeta2``; derivatives vanish where clipped."""
        h = self.h(Zd)
        if not self.design.estimated:
            z = np.zeros_like(h)
            return h, z, z
        zeta = Zd @ self.gamma
        inside = (np.abs(zeta) < LOGIT_CLAMP).astype(float)
        h1 = h * (1 - h) * inside
        h2 = h1 * (1 - 2 * h)
        return h, h1, h2

    def mismatch_rate(self, Zd):
        return float(np.mean(1.0 - self.h(Zd)))


def initial_match_model(design, Zd, correct_rate=0.95, bound=None):
    """Start with every intercept at ``logit(correct_rate)``, slopes zero."""
    design = MatchDesign.parse(design)
    g = np.zeros(Zd.shape[1])
    if design.kind in ("intercept", "z"):
        g[0] = logit(correct_rate)
    elif design.kind == "block":
        g[:] = logit(correct_rate)
    return MatchModel(design, g, bound)


def h_eval(mm, z):
    """``h`` at a single design row ``z``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if mm.design.estimated and z.shape[0] != mm.gamma.shape[0]:
        raise ValueError(f"z has dimension {z.shape[0]}, gamma has {mm.gamma.shape[0]}")
    return float(mm.h(z[None, :])[0])


def match_objective(gamma, Zd, w, offset=0.0):
    """Weighted binary-regression negative log-likelihood in ``gamma``."""
    zeta = np.clip(offset + Zd @ gamma, -LOGIT_CLAMP, LOGIT_CLAMP)
    return float(np.sum(w * np.logaddexp(0.0, -zeta) + (1 - w) * np.logaddexp(0.0, zeta)))


def _newton(Zd, resp, gamma, max_iter=100, tol=1e-13, offset=0.0):
    """Damped Newton for ``sum resp*log(1+e^-zeta) + (1-resp)*log(1+e^zeta)``
    with ``zeta = offset + Zd @ gamma``.

    Steps that raise the objective by more than rounding error are halved, so
    a warm start from the previous EM iterate gives a monotone M-step.
    """
    obj = match_objective(gamma, Zd, resp, offset)
    trace = [obj]
    for _ in range(max_iter):
        zeta = offset + Zd @ gamma
        inside = np.abs(zeta) < LOGIT_CLAMP
        h = expit(np.clip(zeta, -LOGIT_CLAMP, LOGIT_CLAMP))
        grad = -Zd.T @ ((resp - h) * inside)
        hess = Zd.T @ (Zd * (h * (1 - h) * inside)[:, None])
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)) or np.max(np.abs(step), initial=0.0) == 0.0:
            return gamma, trace
        slack = 1e-13 * max(1.0, abs(obj))
        t = 1.0
        for _ in range(40):
            cand = gamma - t * step
            c_obj = match_objective(cand, Zd, resp, offset)
            if c_obj <= obj + slack:
                break
            t *= 0.5
        else:
            return gamma, trace
        done = np.max(np.abs(cand - gamma)) <= tol * (1.0 + np.max(np.abs(gamma)))
        gamma, obj = cand, min(c_obj, obj)
        trace.append(obj)
        if done or np.all(~inside):
            return gamma, trace
    raise MatchFitError("match-model Newton iterations did not converge", trace)


def _unconstrained(design, Zd, w, gamma0):
    if design.kind == "intercept":
        return np.array([np.clip(logit(np.mean(w)), -LOGIT_CLAMP, LOGIT_CLAMP)])
    if design.kind == "block":
        sizes = Zd.sum(axis=0)
        means = (Zd.T @ w) / np.where(sizes > 0, sizes, 1.0)
        return np.clip(logit(means), -LOGIT_CLAMP, LOGIT_CLAMP)
    return _newton(Zd, w, gamma0)[0]


def fit_match_weights(design, Zd, w, bound=None, gamma0=None, bound_rows=None):
    """Fit ``gamma`` to posterior correct-match probabilities ``w = 1 - m_hat``.

    Parameters
    ----------
    design : MatchDesign or str
    Zd : ndarray, shape (n, q)
        Design matrix from :meth:`MatchDesign.matrix`.
    w : ndarray, shape (n,)
        Fractional responses in [0, 1].
    bound : float, optional
        Upper bound on the average mismatch logit ``mean(Zd)' (-gamma)``. If
        the unconstrained fit violates it, the fit is redone on the boundary
        by Newton iterations restricted to the constraint hyperplane.
    gamma0 : ndarray, optional
        Warm start for Newton iterations.
    bound_rows : ndarray of bool, optional
        Rows over which the average in the bound is taken (default: all).
    """
    design = MatchDesign.parse(design)
    if not design.estimated:
        return MatchModel(design, np.zeros(0), bound)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("weights must lie in [0, 1]")
    if gamma0 is None:
        gamma0 = initial_match_model(design, Zd).gamma
    gamma = _unconstrained(design, Zd, w, np.asarray(gamma0, dtype=float))
    active = False
    if bound is not None:
        zbar = Zd[bound_rows].mean(axis=0) if bound_rows is not None else Zd.mean(axis=0)
        if -zbar @ gamma > bound:
            gamma = _fit_on_boundary(Zd, w, zbar, bound, gamma)
            active = True
    zeta = Zd @ gamma
    boundary = bool(np.any(np.abs(zeta) >= LOGIT_CLAMP - 1e-9))
    return MatchModel(design, gamma, bound, boundary, active)


def _fit_on_boundary(Zd, w, zbar, bound, gamma_start):
    """Minimise the weighted objective subject to ``-zbar' gamma = bound``.

    Writes ``gamma = g0 + N u`` with ``g0`` the minimum-norm point on the
    constraint and ``N`` an orthonormal basis of the null space of ``zbar'``,
    then runs Newton in ``u``.
    """
    g0 = -bound * zbar / (zbar @ zbar)
    N = linalg.null_space(zbar[None, :])
    if N.shape[1] == 0:
        return g0
    u0 = N.T @ (gamma_start - g0)
    u = _newton(Zd @ N, w, u0, max_iter=200, offset=Zd @ g0)[0]
    return g0 + N @ u


def with_gamma(mm, gamma):
    return replace(mm, gamma=np.asarray(gamma, dtype=float))
