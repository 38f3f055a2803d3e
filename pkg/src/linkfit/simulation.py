"""Monte-Carlo scenarios for mismatch-contaminated linked files.

Each scenario draws a clean dataset, selects mismatched records by a
mechanism and scrambles their outcomes with a right circular shift (within
blocks where the mechanism has blocks). Records are stored in random order
relative to the covariate grid, so a shifted outcome lands on an unrelated
covariate value.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from . import families as fam
from .data import LinkedDataset
from .em import FitConfig, run_em
from .inference import Z_95, model_covariance, sandwich_covariance

SCENARIOS = (
    "poisson-constant", "poisson-blockwise", "poisson-logistic", "poisson-mis-y",
    "poisson-mis-m", "poisson-mis-ind", "logistic-constant", "gaussian-sine",
)
POISSON_BETA = (0.5, 2.0)
LOGISTIC_BETA = (0.5, -1.5, 1.0, 0.5)
MATCH_GAMMA = (-0.5, 1.0)
BLOCK_RATES = (0.0, 0.1, 0.4, 0.6)
QUADRATIC_COEF = 0.05
COPULA_RHO = 0.5
COPULA_BLOCKS = (50, 20)
KDE_BANDWIDTH = 100.0


@dataclass(frozen=True)
class ScenarioSpec:
    """A simulation setting.

    Parameters
    ----------
    scenario : str
        One of :data:`SCENARIOS`.
    alpha : float
        Constant mismatch rate; ignored by the blockwise, logistic and mis-m
        mechanisms (their rates are fixed by the design).
    n : int
        Number of linked records.
    reps : int
        Number of replications.
    seed : int
        Base seed; replication ``r`` uses ``default_rng([seed, r])``.
    """

    scenario: str = "poisson-constant"
    alpha: float = 0.1
    n: int = 1000
    reps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.scenario == "poisson-mis-ind" and self.n != np.prod(COPULA_BLOCKS):
            raise ValueError(f"poisson-mis-ind needs n = {np.prod(COPULA_BLOCKS)}")

    @property
    def family(self):
        return {"logistic-constant": "logistic", "gaussian-sine": "gaussian"}.get(self.scenario, "poisson")

    @property
    def match_design(self):
        return {"poisson-blockwise": "block", "poisson-logistic": "z",
                "poisson-mis-m": "z"}.get(self.scenario, "intercept")

    def fit_config(self):
        if self.family == "poisson":
            return FitConfig(match_design=self.match_design, marginal="kde", bandwidth=KDE_BANDWIDTH)
        # the binary-outcome likelihood is flat in the mismatch rate, so EM
        # needs far more than the default iteration budget
        return FitConfig(match_design=self.match_design, max_iter=5000)

    def to_dict(self):
        return {"scenario": self.scenario, "alpha": self.alpha, "n": self.n,
                "reps": self.reps, "seed": self.seed}


@dataclass
class Draw:
    """One generated replication with its ground truth."""

    data: LinkedDataset
    m: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    mean: np.ndarray | None = None


def apply_circular_shift(y, m):
    """Right-rotate by one the values of ``y`` at the mismatched positions.

    ``m`` is a boolean mask or an array of indices; other positions are
    returned unchanged.
    """
    y = np.array(y, copy=True)
    m = np.asarray(m)
    idx = np.flatnonzero(m) if m.dtype == bool else np.sort(m)
    if idx.size > 1:
        y[idx] = np.roll(y[idx], 1)
    return y


def _blockwise_shift(y, m, block):
    out = np.array(y, copy=True)
    for b in np.unique(block):
        sel = np.flatnonzero(block == b)
        out[sel] = apply_circular_shift(y[sel], m[sel])
    return out


def _rates_to_gamma(rates):
    with np.errstate(divide="ignore"):
        return logit(1.0 - np.asarray(rates, dtype=float))


def _poisson(spec, rng):
    n = spec.n
    grid = np.linspace(1.0, 5.0, n)
    block = None
    z = None
    if spec.scenario == "poisson-blockwise":
        size = n // 4
        block = np.minimum(np.arange(n) // size, 3)
        x = np.concatenate([rng.permutation(grid[block == b]) for b in range(4)])
    elif spec.scenario == "poisson-mis-ind":
        nb, size = COPULA_BLOCKS
        corr = np.full((size, size), COPULA_RHO) + (1 - COPULA_RHO) * np.eye(size)
        L = np.linalg.cholesky(corr)
        u = stats.norm.cdf(rng.standard_normal((nb, size)) @ L.T)
        x = (1.0 + 4.0 * u).ravel()
        block = np.repeat(np.arange(nb), size)
    else:
        x = rng.permutation(grid)
    eta = POISSON_BETA[0] + POISSON_BETA[1] * x
    if spec.scenario == "poisson-mis-y":
        eta = eta + QUADRATIC_COEF * x ** 2
    mu = np.exp(eta)
    y = rng.poisson(mu).astype(float)

    if spec.scenario == "poisson-blockwise":
        rates = np.asarray(BLOCK_RATES)[block]
        m = rng.random(n) < rates
        gamma = _rates_to_gamma(BLOCK_RATES)
    elif spec.scenario in ("poisson-logistic", "poisson-mis-m"):
        p = np.clip(rng.beta(4.5, 0.5, n), 1e-12, 1 - 1e-12)
        z = logit(p)
        if spec.scenario == "poisson-logistic":
            h = expit(MATCH_GAMMA[0] + MATCH_GAMMA[1] * z)
            gamma = np.array(MATCH_GAMMA)
        else:
            inside = (x >= 2) & (x <= 4)
            h = expit(0.5 * (MATCH_GAMMA[0] + MATCH_GAMMA[1]) * z * inside)
            gamma = np.full(2, np.nan)  # the fitted match model is misspecified
        m = rng.random(n) >= h
    else:
        m = rng.random(n) < spec.alpha
        gamma = _rates_to_gamma([spec.alpha])

    y_obs = _blockwise_shift(y, m, block) if block is not None else apply_circular_shift(y, m)
    ds = LinkedDataset(
        x=np.column_stack([np.ones(n), x]), y=y_obs, family="poisson",
        z=None if z is None else z[:, None], block=block,
        x_names=("(Intercept)", "x"), y_names=("y",), z_names=() if z is None else ("z",),
    )
    return Draw(ds, m, np.array(POISSON_BETA), gamma, mu)


def _logistic(spec, rng):
    n = spec.n
    d = (np.arange(n) >= n // 2).astype(float)
    x = np.linspace(-3.0, 3.0, n)
    order = rng.permutation(n)
    d, x = d[order], x[order]
    X = np.column_stack([np.ones(n), d, x, x * d])
    y = (rng.random(n) < expit(X @ np.array(LOGISTIC_BETA))).astype(float)
    m = rng.random(n) < spec.alpha
    ds = LinkedDataset(x=X, y=apply_circular_shift(y, m), family="logistic",
                       x_names=("(Intercept)", "d", "x", "x:d"), y_names=("y",))
    return Draw(ds, m, np.array(LOGISTIC_BETA), _rates_to_gamma([spec.alpha]))


def sine_data(n=1000, shuffle=0.2, noise=0.25, rng=None):
    """``y = sin(1.5 pi x) + noise * eps`` on ``x = (i-1)/(n-1)`` with a
    fraction ``shuffle`` of the pairs randomly permuted among themselves.

    Returns ``(x, y, m, truth)`` where ``truth`` is the noiseless curve.
    """
    rng = np.random.default_rng(rng)
    x = np.arange(n) / (n - 1)
    truth = np.sin(1.5 * np.pi * x)
    y = truth + noise * rng.standard_normal(n)
    k = int(round(shuffle * n))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    y[idx] = y[rng.permutation(idx)]
    m = np.zeros(n, dtype=bool)
    m[idx] = True
    return x, y, m, truth


def _sine(spec, rng):
    x, y, m, truth = sine_data(spec.n, spec.alpha, rng=rng)
    ds = LinkedDataset(x=np.column_stack([np.ones(spec.n), x]), y=y, family="gaussian",
                       x_names=("(Intercept)", "x"), y_names=("y",))
    return Draw(ds, m, np.full(2, np.nan), _rates_to_gamma([spec.alpha]), truth)


def generate(spec, rep):
    """Draw replication ``rep`` of ``spec``; deterministic in ``(spec.seed, rep)``."""
    if not isinstance(spec, ScenarioSpec):
        raise TypeError("spec must be a ScenarioSpec")
    rng = np.random.default_rng([spec.seed, rep])
    if spec.family == "poisson":
        return _poisson(spec, rng)
    if spec.family == "logistic":
        return _logistic(spec, rng)
    return _sine(spec, rng)


def poisson_kl(mu_true, mu_hat):
    """Per-record Poisson KL divergence, ``mean(mu* log(mu*/mu) - mu* + mu)``."""
    mu_true = np.asarray(mu_true, float)
    mu_hat = np.asarray(mu_hat, float)
    return float(np.mean(mu_true * np.log(mu_true / mu_hat) - mu_true + mu_hat))


@dataclass
class ReplicationResult:
    rep: int
    adjusted: np.ndarray | None = None
    adjusted_se: np.ndarray | None = None
    naive: np.ndarray | None = None
    naive_se: np.ndarray | None = None
    kl_adjusted: float = np.nan
    kl_naive: float = np.nan
    max_decrease: float = 0.0
    converged: bool = True
    error: str | None = None


def fit_replication(spec, rep):
    """Generate and fit one replication, adjusted and naive."""
    draw = generate(spec, rep)
    ds = draw.data
    out = ReplicationResult(rep)
    try:
        fit = run_em(ds, spec.fit_config())
        cov = sandwich_covariance(fit, ds)
        naive = fam.naive_fit(ds)
        ncov = model_covariance(naive, ds)
    except Exception as exc:  # recorded and excluded from the summary
        out.error = f"{type(exc).__name__}: {exc}"
        return out
    out.adjusted, out.adjusted_se = cov.estimate, cov.se
    out.naive, out.naive_se = ncov.estimate, ncov.se
    out.converged = fit.converged
    out.max_decrease = float(max(0.0, -np.min(np.diff(fit.pll_trace), initial=0.0)))
    if spec.scenario == "poisson-mis-y":
        X = ds.x
        out.kl_adjusted = poisson_kl(draw.mean, np.exp(X @ fit.params.beta))
        out.kl_naive = poisson_kl(draw.mean, np.exp(X @ naive.beta))
    return out


def _metrics(est, se, truth):
    est = np.asarray(est, float)
    se = np.asarray(se, float)
    with np.errstate(invalid="ignore", divide="ignore"):
        rb = np.mean(est - truth, axis=0) / truth
        cover = (np.abs(est - truth) <= Z_95 * se).mean(axis=0)
    finite = np.isfinite(truth)
    rb = np.where(finite, rb, np.nan)
    cover = np.where(finite, cover, np.nan)
    sd = est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.full(est.shape[1], np.nan)
    return est.mean(axis=0), rb, sd, cover


@dataclass
class SummaryTable:
    """RB, SD and CG per parameter for the adjusted and naive fits."""

    spec: ScenarioSpec
    names: list
    truth: np.ndarray
    rows: list = field(default_factory=list)
    n_used: int = 0
    n_excluded: int = 0
    errors: list = field(default_factory=list)
    max_decrease: float = 0.0
    n_not_converged: int = 0

    COLUMNS = ("scenario", "alpha", "param", "method", "truth", "mean", "RB", "SD", "CG")

    def row(self, param, method):
        for r in self.rows:
            if r["param"] == param and r["method"] == method:
                return r
        raise KeyError((param, method))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.COLUMNS)
            for r in self.rows:
                wr.writerow([_fmt(r[c]) for c in self.COLUMNS])

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "n_used": self.n_used,
                "n_excluded": self.n_excluded, "n_not_converged": self.n_not_converged,
                "max_pll_decrease": self.max_decrease, "errors": self.errors,
                "rows": [{k: (None if isinstance(v, float) and not np.isfinite(v) else v)
                          for k, v in r.items()} for r in self.rows]}


def _fmt(v):
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return str(v)


def summarize(spec, results):
    """Collect per-replication fits into a :class:`SummaryTable`."""
    draw = generate(spec, 0)
    beta_names = list(draw.data.x_names)
    gamma_names = spec.fit_config().match_design.names(draw.data)
    truth = np.concatenate([draw.beta, draw.gamma])
    ok = [r for r in results if r.error is None]
    table = SummaryTable(spec, beta_names + gamma_names, truth, n_used=len(ok),
                         n_excluded=len(results) - len(ok),
                         errors=[(r.rep, r.error) for r in results if r.error is not None])
    if not ok:
        return table
    table.max_decrease = max(r.max_decrease for r in ok)
    table.n_not_converged = sum(not r.converged for r in ok)
    for method, names, tr in (("adjusted", table.names, truth),
                              ("naive", beta_names, draw.beta)):
        est = np.array([getattr(r, method) for r in ok])
        se = np.array([getattr(r, method + "_se") for r in ok])
        mean, rb, sd, cg = _metrics(est, se, tr)
        for j, nm in enumerate(names):
            table.rows.append({"scenario": spec.scenario, "alpha": spec.alpha, "param": nm,
                               "method": method, "truth": float(tr[j]), "mean": float(mean[j]),
                               "RB": float(rb[j]), "SD": float(sd[j]), "CG": float(cg[j])})
        if spec.scenario == "poisson-mis-y":
            kl = np.array([getattr(r, "kl_" + method) for r in ok])
            table.rows.append({"scenario": spec.scenario, "alpha": spec.alpha, "param": "KL",
                               "method": method, "truth": np.nan, "mean": float(kl.mean()),
                               "RB": np.nan, "SD": float(kl.std(ddof=1)) if kl.size > 1 else np.nan,
                               "CG": np.nan})
    return table


def worker_count(workers=None):
    """Number of worker processes, capped by ``LINKFIT_THREADS`` if set."""
    cap = os.environ.get("LINKFIT_THREADS")
    n = workers if workers is not None else (os.cpu_count() or 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


def run_replications(spec, workers=None):
    """Fit every replication of ``spec`` and summarise.

    Results do not depend on the number of workers: each replication owns
    its generator, and results are collected in replication order.
    """
    if spec.family == "gaussian":
        raise ValueError("gaussian-sine is a spline design; use spline.run_gibbs")
    n_workers = worker_count(workers)
    reps = range(spec.reps)
    if n_workers == 1:
        results = [fit_replication(spec, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(fit_replication, [spec] * spec.reps, reps,
                                    chunksize=max(1, spec.reps // (4 * n_workers))))
    return summarize(spec, results)
