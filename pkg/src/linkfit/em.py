"""EM maximisation of the mismatch-mixture pseudo-likelihood.

Each record contributes ``log[f(y_i) (1 - h_i) + phi_i h_i]`` where ``phi`` is
the family's conditional density and ``f`` the plug-in marginal (or, for the
unsupervised families, the fitted independence density). The E-step computes
posterior mismatch probabilities and the M-step splits into a weighted fit of
the family and a fractional-response logistic fit of the match model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import families as fam
from . import marginals as marg
from .match import MatchDesign, MatchModel, fit_match_weights, initial_match_model

log = logging.getLogger(__name__)

UNSUPERVISED = ("mvnormal", "contingency")


class EMError(RuntimeError):
    def __init__(self, msg, iteration=None):
        super().__init__(msg)
        self.iteration = iteration


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`run_em`.

    ``marginal`` is a fitted marginal model, a kind name (``kde``,
    ``empirical``, ``gaussian``, ``nelson-aalen``, ``mixture``) or ``None``
    for the family default. ``mixture`` (Gaussian only) starts from a KDE and
    then rebuilds ``f_y`` as the location mixture implied by the fit,
    ``refine_passes`` times.
    """

    max_iter: int = 500
    tol: float = 1e-8
    match_design: MatchDesign | str = "intercept"
    marginal: object = None
    bandwidth: float | None = None
    mismatch_bound: float | None = None
    bound_rows: np.ndarray | None = None
    init_correct_rate: float = 0.95
    restart_correct_rate: float = 0.99
    label_swap_guard: bool = True
    refine_passes: int = 1
    use_known_matches: bool = True
    robust_starts: int = 20
    trim: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.trim < 1:
            raise ValueError("trim must lie in (0, 1)")
        object.__setattr__(self, "match_design", MatchDesign.parse(self.match_design))


@dataclass
class EMState:
    t: int
    params: object
    match: MatchModel
    mhat: np.ndarray
    pll: float


@dataclass
class FitResult:
    family: str
    params: object
    match: MatchModel
    mhat: np.ndarray
    pll: float
    pll_trace: list
    converged: bool
    n_iter: int
    marginal: object
    design_matrix: np.ndarray
    config: FitConfig
    restarted: bool = False
    covariance: object = None
    notes: list = field(default_factory=list)

    @property
    def mismatch_rate(self):
        """Fitted average mismatch probability ``mean(1 - h_i)``."""
        return self.match.mismatch_rate(self.design_matrix)

    @property
    def posterior_mismatch_rate(self):
        return float(np.mean(self.mhat))


def resolve_marginal(ds, marginal=None, bandwidth=None):
    """Turn a marginal spec into a fitted marginal (``None`` for unsupervised)."""
    if ds.family in UNSUPERVISED:
        return None
    if marginal is None or isinstance(marginal, str):
        kind = "kde" if marginal == "mixture" else marginal
        return marg.default_marginal(ds, kind, bandwidth)
    return marginal


def _log_f(params, ds, marginal):
    if ds.family in UNSUPERVISED:
        return fam.log_independent_density(params, ds)
    event = ds.event if ds.family == "cox" else None
    return marg.log_marginal(marginal, ds.y, event)


def _known(ds, config):
    if config is not None and not config.use_known_matches:
        return None
    return ds.known_match


def _components(params, mm, ds, marginal, Zd):
    logphi = fam.log_phi(params, ds)
    logf = _log_f(params, ds, marginal)
    logh, log1mh = mm.log_h(Zd)
    return logphi + logh, logf + log1mh


def e_step(params, mm, ds, marginal, Zd=None, known=None):
    """Posterior mismatch probabilities ``P(m_i = 1 | data)``.

    Records flagged in ``known`` are pinned to zero.
    """
    if Zd is None:
        Zd = mm.design.matrix(ds)
    a, b = _components(params, mm, ds, marginal, Zd)
    # P(m=0) = e^a / (e^a + e^b)
    with np.errstate(invalid="ignore"):
        mhat = np.exp(b - np.logaddexp(a, b))
    mhat = np.where(np.isnan(mhat), 0.0, mhat)
    if known is not None:
        mhat = np.where(known, 0.0, mhat)
    return np.clip(mhat, 0.0, 1.0)


def record_loglik(params, mm, ds, marginal, Zd=None, known=None):
    """Per-record pseudo-log-likelihood contributions."""
    if Zd is None:
        Zd = mm.design.matrix(ds)
    a, b = _components(params, mm, ds, marginal, Zd)
    ll = np.logaddexp(a, b)
    if known is not None:
        ll = np.where(known, a, ll)
    return ll


def pseudo_loglik(params, mm, ds, marginal, Zd=None, known=None):
    """``sum_i log[f(y_i)(1 - h_i) + phi_i h_i]``."""
    return float(np.sum(record_loglik(params, mm, ds, marginal, Zd, known)))


def initial_state(ds, config, marginal, Zd, correct_rate=None):
    params = fam.naive_fit(ds)
    if ds.family in UNSUPERVISED:
        # start the independence component at the naive margins
        if ds.family == "mvnormal":
            params = replace(params, gamma_cov=fam._block_diag(params.sigma, params.px))
        else:
            params = replace(params, psi_row=params.pi.sum(axis=1), psi_col=params.pi.sum(axis=0))
    rate = config.init_correct_rate if correct_rate is None else correct_rate
    mm = initial_match_model(config.match_design, Zd, rate, config.mismatch_bound)
    return params, mm


def robust_start(ds, n_starts=20, trim=0.5, seed=0):
    """Starting parameters that ignore the worst-fitting records.

    Each start fits a random elemental subset, then alternates refitting on
    the ``1 - trim`` fraction of records with the highest conditional
    log-density until that set stops changing. The start with the largest
    trimmed log-likelihood wins.
    """
    rng = np.random.default_rng(seed)
    k = ds.n - int(np.floor(trim * ds.n))
    size = min(ds.n, ds.p + 1)
    best, best_obj = None, -np.inf
    for _ in range(n_starts):
        w = np.zeros(ds.n)
        w[rng.choice(ds.n, size, replace=False)] = 1.0
        try:
            fp = fam.mstep(None, ds, w)
            keep = None
            for _ in range(50):
                order = np.argsort(-fam.log_phi(fp, ds), kind="stable")
                new = np.zeros(ds.n, dtype=bool)
                new[order[:k]] = True
                if keep is not None and np.array_equal(new, keep):
                    break
                keep = new
                fp = fam.mstep(fp, ds, keep.astype(float))
        except (fam.FamilyError, fam.DivergenceError, np.linalg.LinAlgError):
            continue
        obj = float(np.sum(np.sort(fam.log_phi(fp, ds))[-k:]))
        if obj > best_obj:
            best, best_obj = fp, obj
    return best


def _em_loop(ds, config, marginal, Zd, params, mm):
    known = _known(ds, config)
    design = config.match_design
    pll = pseudo_loglik(params, mm, ds, marginal, Zd, known)
    trace = [pll]
    mhat = e_step(params, mm, ds, marginal, Zd, known)
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        w = 1.0 - mhat
        try:
            params = fam.mstep(params, ds, w)
            mm = fit_match_weights(design, Zd, w, bound=config.mismatch_bound,
                                   gamma0=mm.gamma, bound_rows=config.bound_rows)
        except (fam.FamilyError, fam.DivergenceError, RuntimeError) as exc:
            raise EMError(f"M-step failed at iteration {it}: {exc}", it) from exc
        new = pseudo_loglik(params, mm, ds, marginal, Zd, known)
        if not np.isfinite(new):
            raise EMError(f"pseudo-log-likelihood not finite at iteration {it}", it)
        trace.append(new)
        mhat = e_step(params, mm, ds, marginal, Zd, known)
        if design.kind == "none" or abs(new - pll) <= config.tol * max(abs(pll), 1.0):
            converged = True
            pll = new
            break
        pll = new
    return EMState(it, params, mm, mhat, pll), trace, converged


def run_em(ds, config=None, marginal=None):
    """Fit the mismatch mixture by EM.

    Parameters
    ----------
    ds : LinkedDataset
    config : FitConfig, optional
    marginal : fitted marginal, optional
        Overrides ``config.marginal``.

    Returns
    -------
    FitResult
        ``converged`` is False when ``max_iter`` was reached; the last iterate
        is returned in that case.
    """
    config = config or FitConfig()
    design = config.match_design
    if ds.family == "contingency" and design.kind in ("intercept", "z", "block"):
        raise EMError("contingency tables need a fixed mismatch rate (match design 'fixed:<rate>')")
    spec = marginal if marginal is not None else config.marginal
    marginal = resolve_marginal(ds, spec, config.bandwidth)
    Zd = design.matrix(ds)

    def swapped(st):
        return design.estimated and np.mean(1.0 - st.mhat) < 0.5

    def attempt(params, mm):
        try:
            return _em_loop(ds, config, marginal, Zd, params, mm)
        except EMError as exc:
            log.info("EM run failed: %s", exc)
            return None

    def better(new, old):
        if new is None:
            return False
        if old is None:
            return True
        if swapped(old[0]) != swapped(new[0]):
            return swapped(old[0])
        return new[0].pll > old[0].pll

    notes = []
    restarted = False
    params, mm = initial_state(ds, config, marginal, Zd)
    result = attempt(params, mm)
    if config.label_swap_guard and design.estimated and (result is None or swapped(result[0])):
        log.info("estimated correct-match rate below 0.5; restarting EM")
        params, mm = initial_state(ds, config, marginal, Zd, config.restart_correct_rate)
        second = attempt(params, mm)
        restarted = True
        notes.append("label-swap guard triggered a restart")
        if better(second, result):
            result = second
        if (result is None or swapped(result[0])) and config.robust_starts > 0 \
                and ds.family not in UNSUPERVISED:
            start = robust_start(ds, config.robust_starts, config.trim, config.seed)
            if start is not None:
                mm = initial_match_model(design, Zd, config.init_correct_rate, config.mismatch_bound)
                third = attempt(start, mm)
                notes.append("restarted from a trimmed robust fit")
                if better(third, result):
                    result = third
    if result is None:
        # surface the original failure
        _em_loop(ds, config, marginal, Zd, *initial_state(ds, config, marginal, Zd))
    state, trace, converged = result

    if spec == "mixture" and ds.family == "gaussian":
        for _ in range(config.refine_passes):
            marginal = marg.MixtureOfConditionals(state.params, ds.x)
            params, mm = state.params, state.match
            state, trace, converged = _em_loop(ds, config, marginal, Zd, params, mm)
            notes.append("marginal refined as location mixture")

    if not converged:
        notes.append(f"not converged after {config.max_iter} iterations")
    return FitResult(
        family=ds.family, params=state.params, match=state.match, mhat=state.mhat,
        pll=state.pll, pll_trace=trace, converged=converged, n_iter=state.t,
        marginal=marginal, design_matrix=Zd, config=config, restarted=restarted,
        notes=notes,
    )


def naive_em_config(config=None):
    """Copy of ``config`` with ``h`` pinned to one (the classical fit)."""
    config = config or FitConfig()
    return replace(config, match_design=MatchDesign("none"), mismatch_bound=None)
