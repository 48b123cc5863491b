from __future__ import annotations

import warnings
from fractions import Fraction
from itertools import combinations, product

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multichain_mwpow.security import (
    CombinatorialCutoffWarning,
    DomainError,
    GroupProfile,
    ShardPopulation,
    VoteProfile,
    Voter,
    block_control_exact,
    block_control_prob,
    class_attack_prob,
    class_attack_prob_approx,
    class_attack_prob_max,
    flexible_attack_prob,
    hypergeom_failure,
    hypergeom_tail,
    min_flexible_threshold,
    optimal_allocation,
    support_margin_prob,
    support_margin_search,
)


# --- oracles ----------------------------------------------------------------

def enumerate_shards(n: int, t: int, m: int) -> Fraction:
    """Count every m-subset of n labelled nodes (first t adversarial)."""
    bad = total = 0
    for shard in combinations(range(n), m):
        adv = sum(1 for x in shard if x < t)
        total += 1
        bad += adv > m // 2
    return Fraction(bad, total)


def urn_enumeration(pop: int, adv: int, counts: list[int]) -> Fraction:
    """Draw counts[i] voters from each group of ``pop`` nodes holding ``adv`` adversaries."""
    p = Fraction(1)
    for k in counts:
        if k == 0:
            continue
        hits = total = 0
        for draw in combinations(range(pop), k):
            total += 1
            hits += all(x < adv for x in draw)
        p *= Fraction(hits, total)
    return p


def all_allocations(t: int, T: int, s: int):
    for alloc in product(range(min(t, s) + 1), repeat=T):
        if sum(alloc) == t:
            yield alloc


# --- hypergeometric -----------------------------------------------------------

def test_hypergeom_examples():
    assert hypergeom_failure(ShardPopulation(6, 3, 3, 2, 2)) == 0.5
    assert hypergeom_failure(ShardPopulation(100, 0, 10, 10, 6)) == 0.0
    assert hypergeom_failure(ShardPopulation(2000, 1000, 200, 10, 101)) > 0.1


def test_hypergeom_domain_errors():
    with pytest.raises(DomainError):
        ShardPopulation(10, 11, 3, 1, 2)
    with pytest.raises(DomainError):
        hypergeom_tail(10, 3, 11)
    with pytest.raises(DomainError):
        ShardPopulation(10, 3, 4, 1, 2)  # T = m/2 is not a majority


def test_hypergeom_matches_subset_enumeration():
    for n in range(1, 11):
        for m in range(1, n + 1):
            for t in range(n + 1):
                assert hypergeom_tail(n, t, m) == enumerate_shards(n, t, m)


def test_hypergeom_tiny_values_are_representable():
    p = hypergeom_tail(2000, 400, 200)
    assert 0 < float(p) < 1e-20


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.data())
def test_hypergeom_monotone_in_t(n, data):
    m = data.draw(st.integers(1, n))
    values = [hypergeom_tail(n, t, m) for t in range(n + 1)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert all(0 <= v <= 1 for v in values)


def test_hypergeom_full_shard_zero_below_majority():
    for m in range(1, 12):
        for t in range(m // 2 + 1):
            assert hypergeom_tail(m, t, m) == 0


# --- class allocation -----------------------------------------------------------

def test_class_attack_examples():
    assert class_attack_prob([3, 2], 5) == pytest.approx(0.24, rel=1e-15)
    assert class_attack_prob([4, 4, 4], 4) == 1.0
    assert class_attack_prob([3, 0, 2], 5) == 0.0
    with pytest.raises(DomainError):
        class_attack_prob([6, 1], 5)


def test_optimal_allocation_examples():
    assert optimal_allocation(7, 3) == [3, 2, 2]
    assert optimal_allocation(6, 3) == [2, 2, 2]
    assert optimal_allocation(0, 4) == [0, 0, 0, 0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.integers(1, 50))
def test_optimal_allocation_sums(t, T):
    alloc = optimal_allocation(t, T)
    assert len(alloc) == T and sum(alloc) == t
    assert max(alloc) - min(alloc) <= 1


def test_optimal_allocation_dominates_every_allocation():
    for T in range(1, 5):
        for t in range(13):
            for s in range(1, 7):
                if t > s * T:
                    continue
                best = class_attack_prob_max(t, T, s)
                top = max(class_attack_prob(a, s) for a in all_allocations(t, T, s))
                assert best == top


def test_class_attack_max_examples():
    assert class_attack_prob_max(7, 3, 5) == pytest.approx(0.096, rel=1e-15)
    assert class_attack_prob_max(0, 3, 5) == 0.0
    assert class_attack_prob_max(6 * 10 // 2, 10, 6) == 0.5 ** 10


def test_half_population_gives_half_power_m():
    for m in (2, 4, 5, 10, 20):
        s = 6
        assert class_attack_prob_max(s * m // 2, m, s) == 0.5 ** m


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 30), st.integers(10, 40), st.data())
def test_approximation_within_ten_percent(T, s, data):
    t = data.draw(st.integers(10 * T, T * s))
    exact = class_attack_prob_max(t, T, s)
    approx = class_attack_prob_approx(t, T, s)
    assert approx == pytest.approx(exact, rel=0.1)


# --- flexible threshold ---------------------------------------------------------

def test_flexible_examples():
    assert flexible_attack_prob(4, 3) == pytest.approx(8 / 27, rel=1e-12)
    assert flexible_attack_prob(10, 5) == 1.0
    with pytest.raises(DomainError):
        flexible_attack_prob(4, 5)


def test_flexible_threshold_scan_oracle():
    # straight float scan as an independent route
    m = 800
    T = next(T for T in range(401, 801) if (m / (2 * T)) ** T <= 1e-6)
    assert min_flexible_threshold(m) == T
    assert 0.48 <= T / m <= 0.52


# --- block control -------------------------------------------------------------

def test_block_control_examples():
    g = GroupProfile(Sg=2, bl=(1, 1), AP=2, totalStrength=4, perGroupCount=2)
    assert block_control_prob(g, VoteProfile((1, 1)), n=4) == 0.25
    assert block_control_prob(g, VoteProfile((2, 1)), n=4) == 0.0
    full = GroupProfile(Sg=2, bl=(1, 3), AP=10, totalStrength=10, perGroupCount=2)
    assert block_control_prob(full, VoteProfile((2, 2)), n=4) == 1.0


def test_block_control_requires_a_vote():
    g = GroupProfile(Sg=2, bl=(1, 1), AP=2, totalStrength=4, perGroupCount=2)
    with pytest.raises(DomainError):
        block_control_prob(g, VoteProfile((0, 0)), n=4)


def test_block_control_matches_urn_enumeration():
    checked = 0
    for Sg in (1, 2, 3):
        for pop in range(1, 7):
            n = pop * Sg
            bl = tuple(range(1, Sg + 1))
            for AP in range(0, pop * sum(bl) + 1):
                g = GroupProfile(Sg, bl, AP, pop * sum(bl), pop)
                for counts in product(range(pop + 1), repeat=Sg):
                    if not any(counts):
                        continue
                    got = block_control_exact(g, VoteProfile(counts), n)
                    tt = sum(b for b, k in zip(bl, counts) if k)
                    adv = min(AP // tt, pop)
                    want = urn_enumeration(pop, adv, list(counts))
                    assert got == want
                    checked += 1
    assert checked > 1000


# --- support margin -------------------------------------------------------------

def brute_margin(g, voters, margin, n):
    best = Fraction(-1)
    for r in range(len(voters) + 1):
        for subset in combinations(voters, r):
            if sum(v.strength for v in subset) < margin:
                continue
            if not subset:
                p = Fraction(1)
            else:
                p = block_control_exact(g, VoteProfile.from_groups((v.group for v in subset), g.Sg), n)
            best = max(best, p)
    return 0.0 if best < 0 else float(best)


def test_margin_zero_is_certain():
    g = GroupProfile(2, (1, 2), 6, 12, 3)
    assert support_margin_prob(g, [Voter(0, 1.0)], 0, n=6) == 1.0


def test_margin_single_voter_is_forced():
    g = GroupProfile(2, (1, 2), 6, 12, 3)
    got = support_margin_prob(g, [Voter(1, 5.0)], 4.0, n=6)
    assert got == block_control_prob(g, VoteProfile((0, 1)), n=6)


def test_margin_three_voter_bruteforce():
    g = GroupProfile(3, (1, 2, 3), 9, 24, 4)
    voters = [Voter(0, 1.5), Voter(1, 2.5), Voter(2, 3.5)]
    for margin in (0.5, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 7.5, 8.0):
        assert support_margin_prob(g, voters, margin, n=12) == brute_margin(g, voters, margin, 12)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 2), st.integers(1, 9)), min_size=1, max_size=6),
    st.integers(0, 30),
    st.integers(1, 40),
)
def test_margin_matches_subset_bruteforce(raw, margin, AP):
    g = GroupProfile(3, (1, 2, 4), AP, 60, 6)
    voters = [Voter(gr, float(s)) for gr, s in raw]
    counts = [sum(1 for v in voters if v.group == i) for i in range(3)]
    if max(counts) > 6:
        return
    assert support_margin_prob(g, voters, margin, n=18) == brute_margin(g, voters, margin, 18)


def test_margin_unreachable_is_zero():
    g = GroupProfile(2, (1, 2), 6, 12, 3)
    assert support_margin_prob(g, [Voter(0, 1.0)], 5.0, n=6) == 0.0


def test_margin_greedy_fallback_is_flagged():
    g = GroupProfile(2, (1, 2), 40, 100, 30)
    voters = [Voter(i % 2, 1.0 + i % 3) for i in range(25)]
    res = support_margin_search(g, voters, 10.0, n=60)
    assert not res.exhaustive
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        p = support_margin_prob(g, voters, 10.0, n=60)
    assert p == res.prob
    assert any(issubclass(w.category, CombinatorialCutoffWarning) for w in caught)
    # a feasible subset value never exceeds the exhaustive optimum
    exact = support_margin_search(g, voters, 10.0, n=60, limit=30)
    assert exact.exhaustive and res.prob <= exact.prob


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 60), st.data())
def test_probabilities_in_unit_interval(Sg, pop, AP, data):
    bl = tuple(sorted(data.draw(st.lists(st.integers(1, 9), min_size=Sg, max_size=Sg))))
    total = max(AP, pop * sum(bl))
    g = GroupProfile(Sg, bl, AP, total, pop)
    counts = data.draw(st.lists(st.integers(0, pop), min_size=Sg, max_size=Sg))
    if not any(counts):
        return
    assert 0.0 <= block_control_prob(g, VoteProfile(counts)) <= 1.0
