import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adarank.adapters import SvdAdapter
from adarank.allocator import (BudgetSchedule, budget_at, effective_budget, initial_rank, prune,
                               select_top)
from adarank.errors import ConfigurationError, ContractError
from adarank.importance import TripletScore


def printed_schedule(b0, bT, ti, tf, T, t):
    """Exact rational evaluation of the cubic schedule, rounded half up."""
    if t < ti:
        val = Fraction(b0)
    elif t < T - tf:
        frac = 1 - Fraction(t - ti - tf, T - ti - tf)
        val = bT + (b0 - bT) * frac ** 3
    else:
        val = Fraction(bT)
    return int(val + Fraction(1, 2)) if val >= 0 else -int(-val + Fraction(1, 2))


def test_schedule_endpoints_and_worked_value():
    s = BudgetSchedule(144, 96, 100, 100, 1100)
    assert budget_at(s, 0) == 144
    assert budget_at(s, 1100) == 96
    # (1 - 400/900)^3 = (5/9)^3 = 125/729; 96 + 48 * 125/729 = 104.23...
    assert budget_at(s, 600) == printed_schedule(144, 96, 100, 100, 1100, 600) == 104


def test_schedule_grid_matches_exact_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 10_000:
        bT = int(rng.integers(0, 200))
        b0 = bT + int(rng.integers(0, 200))
        T = int(rng.integers(1, 5000))
        ti = int(rng.integers(0, T + 1))
        tf = int(rng.integers(0, T - ti + 1))
        s = BudgetSchedule(b0, bT, ti, tf, T)
        for t in rng.integers(0, T + 1, size=20):
            assert budget_at(s, int(t)) == printed_schedule(b0, bT, ti, tf, T, int(t))
            checked += 1


def test_schedule_out_of_range():
    s = BudgetSchedule(10, 5, 1, 1, 10)
    with pytest.raises(ContractError):
        budget_at(s, -1)
    with pytest.raises(ContractError):
        budget_at(s, 11)


@pytest.mark.parametrize("kw", [dict(b0=5, bT=6), dict(ti=-1), dict(ti=6, tf=5), dict(form="linear")])
def test_schedule_validation(kw):
    args = dict(b0=10, bT=5, ti=2, tf=2, T=10)
    args.update(kw)
    with pytest.raises(ConfigurationError):
        BudgetSchedule(**args)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 300), st.integers(0, 300), st.integers(1, 2000), st.data())
def test_schedule_monotone_and_boundaries(bT, extra, T, data):
    ti = data.draw(st.integers(0, T))
    tf = data.draw(st.integers(0, T - ti))
    b0 = bT + extra
    for form in ("as_printed", "ti_only"):
        s = BudgetSchedule(b0, bT, ti, tf, T, form)
        vals = [effective_budget(s, t, b0) for t in range(T + 1)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert budget_at(s, T - tf) == bT
        if ti < T - tf:
            assert abs(vals[ti] - b0) <= 1
    s = BudgetSchedule(b0, bT, ti, tf, T, "ti_only")
    if ti < T - tf:
        assert abs(budget_at(s, ti) - b0) <= 1
    raw = [budget_at(BudgetSchedule(b0, bT, ti, tf, T), t) for t in range(ti, T - tf)]
    assert all(a >= b for a, b in zip(raw, raw[1:]))


def test_as_printed_overshoots_after_warmup():
    s = BudgetSchedule(144, 96, 100, 100, 1100)
    assert budget_at(s, 99) == 144
    assert budget_at(s, 100) > 144
    assert effective_budget(s, 100, 144) == 144


def test_initial_rank():
    assert initial_rank(144, 72) == 2
    assert initial_rank(100, 72) == 2 and 72 * initial_rank(100, 72) == 144
    assert initial_rank(37, 1) == 37
    with pytest.raises(ContractError):
        initial_rank(10, 0)


def _adapters(n, r, rng=None):
    rng = rng or np.random.default_rng(0)
    return [SvdAdapter(p=rng.normal(size=(3, r)), lam=rng.normal(size=r) + 3.0, q=rng.normal(size=(r, 3)),
                       matrix_id=k) for k in range(n)]


def _scores(values, r):
    return [TripletScore(k // r, k % r, float(v)) for k, v in enumerate(values)]


def test_prune_worked_example():
    ads = _adapters(3, 2)
    d = prune(_scores([5, 1, 4, 2, 3, 6], 2), 3, ads)
    assert d.kept == {(0, 0), (1, 0), (2, 1)}
    assert d.dropped == {(0, 1), (1, 1), (2, 0)}
    assert ads[0].lam[1] == 0 and ads[1].lam[1] == 0 and ads[2].lam[0] == 0
    assert ads[0].lam[0] != 0


def test_prune_vacuous_and_empty():
    ads = _adapters(2, 3)
    before = [a.lam.copy() for a in ads]
    d = prune(_scores(range(6), 3), 10, ads)
    assert not d.dropped and all(np.array_equal(a.lam, b) for a, b in zip(ads, before))
    prune(_scores(range(6), 3), 0, ads)
    assert all(np.all(a.lam == 0) and not a.mask.any() for a in ads)


def test_prune_rejects_duplicates():
    ads = _adapters(1, 2)
    with pytest.raises(ContractError):
        prune([TripletScore(0, 0, 1.0), TripletScore(0, 0, 2.0), TripletScore(0, 1, 1.0)], 1, ads)


def brute_force_keep(values, r, budget):
    """Check every subset of size min(budget, n) for the lexicographically best one."""
    n = len(values)
    k = min(budget, n)
    best = None
    for subset in itertools.combinations(range(n), k):
        key = sorted(((-values[i], i // r, i % r) for i in subset))
        if best is None or key < best[0]:
            best = (key, subset)
    return {(i // r, i % r) for i in best[1]}


def full_sort_keep(values, r, budget):
    order = sorted(range(len(values)), key=lambda i: (-values[i], i // r, i % r))
    return {(i // r, i % r) for i in order[:budget]}


def test_select_top_matches_brute_force_small():
    rng = np.random.default_rng(3)
    for _ in range(200):
        r = int(rng.integers(1, 3))
        n = int(rng.integers(1, 4)) * r
        values = rng.integers(0, 3, size=n).astype(float).tolist()
        budget = int(rng.integers(0, n + 2))
        kept, dropped = select_top(_scores(values, r), budget)
        assert kept == brute_force_keep(values, r, budget)


def test_select_top_matches_full_sort_with_ties():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        r = int(rng.integers(1, 5))
        n_mat = int(rng.integers(1, 10))
        values = rng.integers(0, 6, size=n_mat * r).astype(float).tolist()
        budget = int(rng.integers(0, n_mat * r + 3))
        kept, dropped = select_top(_scores(values, r), budget)
        assert kept == full_sort_keep(values, r, budget)
        assert len(kept) == min(budget, n_mat * r)
        assert kept.isdisjoint(dropped)
        if kept and dropped:
            lookup = {(k // r, k % r): v for k, v in enumerate(values)}
            assert min(lookup[k] for k in kept) >= max(lookup[k] for k in dropped)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=24), st.integers(0, 30), st.randoms())
def test_select_top_permutation_equivariant(values, budget, rnd):
    scores = _scores([float(v) for v in values], 1)
    shuffled = list(scores)
    rnd.shuffle(shuffled)
    assert select_top(scores, budget) == select_top(shuffled, budget)


def test_exactly_b_after_prune():
    rng = np.random.default_rng(8)
    for _ in range(50):
        ads = _adapters(5, 3, rng)
        budget = int(rng.integers(0, 20))
        prune(_scores(rng.random(15), 3), budget, ads)
        assert sum(int(a.mask.sum()) for a in ads) == min(budget, 15)


def test_reactivation_logged():
    ads = _adapters(2, 2)
    prune(_scores([1, 0, 3, 2], 2), 2, ads)
    assert not ads[0].mask.any()
    d = prune(_scores([9, 0, 3, 2], 2), 2, ads, step=10)
    assert d.reactivated == {(0, 0)}
    actions = {(m, i): act for _, m, i, act in d.rows()}
    assert actions[(0, 0)] == "reactivate" and actions[(1, 0)] == "keep" and actions[(1, 1)] == "drop"
