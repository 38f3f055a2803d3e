import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from linkfit.data import LinkedDataset
from linkfit.match import (
    LOGIT_CLAMP, MatchDesign, MatchModel, _newton, fit_match_weights, h_eval, match_objective,
)


def test_h_eval_values():
    assert h_eval(MatchModel(MatchDesign("intercept"), np.zeros(1)), [1.0]) == 0.5
    assert h_eval(MatchModel(MatchDesign("intercept"), np.array([logit(0.9)])), [1.0]) == pytest.approx(0.9)
    mm = MatchModel(MatchDesign("z"), np.array([-0.5, 1.0]))
    assert h_eval(mm, [1.0, 2.0]) == pytest.approx(0.8175744762)
    assert h_eval(MatchModel(MatchDesign("fixed", 0.1)), [1.0]) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        h_eval(mm, [1.0])


def test_design_parsing():
    assert MatchDesign.parse("fixed:0.25") == MatchDesign("fixed", 0.25)
    assert str(MatchDesign.parse("fixed:0.25")) == "fixed:0.25"
    with pytest.raises(ValueError):
        MatchDesign.parse("probit")
    with pytest.raises(ValueError):
        MatchDesign("fixed", 1.5)


def test_block_design_requires_blocks():
    ds = LinkedDataset(np.ones((3, 1)), [1.0, 2.0, 3.0], "gaussian")
    with pytest.raises(ValueError):
        MatchDesign("block").matrix(ds)


def test_intercept_closed_form():
    Zd = np.ones((10, 1))
    mm = fit_match_weights("intercept", Zd, np.full(10, 0.8))
    assert mm.gamma[0] == pytest.approx(logit(0.8))


def test_block_closed_form_with_clamp():
    Zd = np.repeat(np.eye(2), 5, axis=0)
    w = np.r_[np.ones(5), np.full(5, 0.9)]
    mm = fit_match_weights("block", Zd, w)
    assert mm.gamma[0] == LOGIT_CLAMP
    assert mm.gamma[1] == pytest.approx(logit(0.9))
    assert mm.boundary


def test_all_ones_flags_boundary():
    mm = fit_match_weights("intercept", np.ones((4, 1)), np.ones(4))
    assert mm.gamma[0] == LOGIT_CLAMP and mm.boundary


def test_inactive_constraint():
    Zd = np.ones((100, 1))
    w = np.full(100, 0.97)
    mm = fit_match_weights("intercept", Zd, w, bound=logit(0.05))
    assert not mm.constrained_active
    assert 1 - expit(mm.gamma[0]) == pytest.approx(0.03)


def test_active_constraint_hits_bound():
    rng = np.random.default_rng(0)
    Zd = np.column_stack([np.ones(200), rng.normal(size=200)])
    w = rng.uniform(0.2, 0.6, 200)
    b = logit(0.3)
    mm = fit_match_weights("z", Zd, w, bound=b)
    assert mm.constrained_active
    assert -Zd.mean(axis=0) @ mm.gamma == pytest.approx(b, abs=1e-8)
    # optimal on the constraint line: no feasible perturbation does better
    base = match_objective(mm.gamma, Zd, w)
    zbar = Zd.mean(axis=0)
    tangent = np.array([-zbar[1], zbar[0]])
    for t in (-1e-3, 1e-3):
        assert match_objective(mm.gamma + t * tangent, Zd, w) >= base - 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=2, max_size=40))
def test_newton_agrees_with_closed_form(ws):
    w = np.array(ws)
    Zd = np.ones((w.size, 1))
    g = _newton(Zd, w, np.zeros(1))[0]
    assert expit(g[0]) == pytest.approx(w.mean(), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=30), st.floats(0.0, 0.5))
def test_intercept_monotone_in_weights(ws, bump):
    w = np.array(ws)
    a = fit_match_weights("intercept", np.ones((w.size, 1)), w).gamma[0]
    b = fit_match_weights("intercept", np.ones((w.size, 1)), np.minimum(w + bump, 1.0)).gamma[0]
    assert b >= a


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 1))
def test_constraint_always_satisfied(seed, b):
    rng = np.random.default_rng(seed)
    Zd = np.column_stack([np.ones(50), rng.normal(size=50)])
    w = rng.uniform(size=50)
    mm = fit_match_weights("z", Zd, w, bound=b)
    assert -Zd.mean(axis=0) @ mm.gamma <= b + 1e-8
