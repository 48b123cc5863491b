"""Failure-probability calculators for committee sampling and group voting.

Every function works in exact rational arithmetic internally (Python integers
and ``fractions.Fraction``) and converts to ``float`` only at the end, so tail
probabilities far below 1e-20 keep their full relative precision.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from itertools import product
from typing import Iterable, Sequence

DEFAULT_THRESHOLD = 1e-6
EXHAUSTIVE_VOTER_LIMIT = 20


class DomainError(ValueError):
    """Raised when inputs fall outside a formula's domain."""


class CombinatorialCutoffWarning(RuntimeWarning):
    """Voter enumeration exceeded the exhaustive bound; a greedy value was used."""


@dataclass(frozen=True)
class ShardPopulation:
    n: int
    t: int
    m: int
    s: int
    T: int

    def __post_init__(self) -> None:
        if not 0 <= self.t <= self.n:
            raise DomainError(f"adversary count t={self.t} outside [0, n={self.n}]")
        if not 1 <= self.m <= self.n:
            raise DomainError(f"shard size m={self.m} outside [1, n={self.n}]")
        if self.s < 1:
            raise DomainError("shard count must be positive")
        # T must be a strict majority of the shard
        if not (2 * self.T > self.m and self.T <= self.m):
            raise DomainError(f"threshold T={self.T} must satisfy m/2 < T <= m (m={self.m})")


@dataclass(frozen=True)
class GroupProfile:
    """Strength classes of the whole system.

    ``bl`` holds the lower strength boundary of each of the ``Sg`` groups,
    ``AP`` the adversary's total strength and ``perGroupCount`` the number of
    nodes in one group (n / Sg).
    """

    Sg: int
    bl: tuple[float, ...]
    AP: float
    totalStrength: float
    perGroupCount: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "bl", tuple(self.bl))
        if self.Sg < 1:
            raise DomainError("Sg must be at least 1")
        if len(self.bl) != self.Sg:
            raise DomainError(f"bl has {len(self.bl)} entries, expected Sg={self.Sg}")
        if any(b > a for a, b in zip(self.bl[1:], self.bl)):
            raise DomainError("bl must be ascending")
        if self.AP > self.totalStrength:
            raise DomainError("adversary strength exceeds total strength")
        if self.perGroupCount < 0:
            raise DomainError("perGroupCount must be non-negative")


@dataclass(frozen=True)
class VoteProfile:
    """Voter count per group for one block; ``DG`` is derived from ``NgS``."""

    NgS: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "NgS", tuple(int(k) for k in self.NgS))
        if any(k < 0 for k in self.NgS):
            raise DomainError("voter counts must be non-negative")

    @property
    def DG(self) -> tuple[int, ...]:
        return tuple(1 if k > 0 else 0 for k in self.NgS)

    @classmethod
    def from_groups(cls, voter_groups: Iterable[int], Sg: int) -> "VoteProfile":
        counts = [0] * Sg
        for g in voter_groups:
            counts[g] += 1
        return cls(tuple(counts))


@dataclass(frozen=True)
class Voter:
    group: int
    strength: float


# --- committee sampling -----------------------------------------------------

def hypergeom_tail(n: int, t: int, m: int) -> Fraction:
    """Exact Pr[X > floor(m/2)] for X ~ Hypergeometric(n, t, m)."""
    if t > n or m > n:
        raise DomainError(f"need t <= n and m <= n, got n={n} t={t} m={m}")
    if t < 0 or m < 0:
        raise DomainError("counts must be non-negative")
    lo = m // 2 + 1
    num = sum(math.comb(t, x) * math.comb(n - t, m - x) for x in range(lo, min(m, t) + 1))
    return Fraction(num, math.comb(n, m))


def hypergeom_failure(pop: ShardPopulation) -> float:
    """Probability that a uniformly sampled shard has an adversary majority."""
    return float(hypergeom_tail(pop.n, pop.t, pop.m))


# --- class based assignment ---------------------------------------------------

def _class_attack_exact(allocation: Sequence[int], s: int) -> Fraction:
    if s < 1:
        raise DomainError("shard count must be positive")
    num = 1
    for a in allocation:
        if a < 0 or a > s:
            raise DomainError(f"class count {a} outside [0, s={s}]")
        num *= a
    return Fraction(num, s ** len(allocation))


def class_attack_prob(allocation: Sequence[int], s: int) -> float:
    return float(_class_attack_exact(allocation, s))


def optimal_allocation(t: int, T: int) -> list[int]:
    """Spread ``t`` adversary nodes over ``T`` classes as evenly as possible."""
    if t < 0 or T < 1:
        raise DomainError("need t >= 0 and T >= 1")
    q, r = divmod(t, T)
    return [q + 1] * r + [q] * (T - r)


def class_attack_prob_max_exact(t: int, T: int, s: int) -> Fraction:
    return _class_attack_exact(optimal_allocation(t, T), s)


def class_attack_prob_max(t: int, T: int, s: int) -> float:
    return float(class_attack_prob_max_exact(t, T, s))


def class_attack_prob_approx(t: int, T: int, s: int) -> float:
    return (t / (T * s)) ** T


def flexible_attack_prob_exact(m: int, T: int) -> Fraction:
    if T < 1 or T > m:
        raise DomainError(f"need 1 <= T <= m, got m={m} T={T}")
    return min(Fraction(1), Fraction(m, 2 * T) ** T)


def flexible_attack_prob(m: int, T: int) -> float:
    """Chance of controlling a shard with ``m`` colour categories and threshold ``T``.

    Values above one (T < m/2) are clamped, since the adversary then wins surely.
    """
    return float(flexible_attack_prob_exact(m, T))


def min_flexible_threshold(m: int, threshold: float = DEFAULT_THRESHOLD) -> int:
    """Smallest T whose flexible attack probability is at most ``threshold``."""
    bound = Fraction(threshold)
    for T in range(m // 2 + 1, m + 1):
        if flexible_attack_prob_exact(m, T) <= bound:
            return T
    raise DomainError(f"no T <= m={m} reaches threshold {threshold}")


# --- strength groups ----------------------------------------------------------

def adversary_per_group(groups: GroupProfile, votes: VoteProfile) -> int:
    """Adversary nodes per voting group, ``AP / tt`` truncated and capped by group size."""
    if len(votes.NgS) != groups.Sg:
        raise DomainError("vote profile length differs from Sg")
    tt = sum(Fraction(b) for b, d in zip(groups.bl, votes.DG) if d)
    if tt <= 0:
        raise DomainError("no group voted (tt = 0)")
    per = math.floor(Fraction(groups.AP) / tt)
    return min(per, groups.perGroupCount)


def block_control_exact(groups: GroupProfile, votes: VoteProfile, n: int | None = None) -> Fraction:
    pop = groups.perGroupCount if n is None else n // groups.Sg
    a = min(adversary_per_group(groups, votes), pop)
    p = Fraction(1)
    for k in votes.NgS:
        if k == 0:
            continue
        if k > pop:
            raise DomainError(f"{k} voters exceed group population {pop}")
        if k > a:
            return Fraction(0)
        p *= Fraction(math.comb(a, k), math.comb(pop, k))
    return p


def block_control_prob(groups: GroupProfile, votes: VoteProfile, n: int | None = None) -> float:
    """Chance that every voter of a block belongs to the adversary.

    ``n`` (total node count) sets the group population ``n // Sg``; when
    omitted ``groups.perGroupCount`` is used.
    """
    return float(block_control_exact(groups, votes, n))


@dataclass(frozen=True)
class MarginSearch:
    prob: float
    counts: tuple[int, ...]
    exhaustive: bool


def support_margin_search(
    groups: GroupProfile,
    winner_voters: Sequence[Voter],
    margin: float,
    n: int | None = None,
    limit: int = EXHAUSTIVE_VOTER_LIMIT,
) -> MarginSearch:
    """Most likely adversary subset of the winner's voters that covers ``margin``.

    The adversary only needs some voters whose strength adds up to the margin,
    so the relevant chance is the largest control probability over such
    subsets. For a fixed count per group the strongest voters of that group
    dominate, which lets the search run over count vectors instead of raw
    subsets.
    """
    if margin < 0:
        raise DomainError("margin must be non-negative")
    empty = (0,) * groups.Sg
    if margin == 0:
        return MarginSearch(1.0, empty, True)

    by_group: list[list[float]] = [[] for _ in range(groups.Sg)]
    for v in winner_voters:
        by_group[v.group].append(float(v.strength))
    for lst in by_group:
        lst.sort(reverse=True)
    if sum(map(sum, by_group)) < margin:
        return MarginSearch(0.0, empty, True)

    def value(counts: tuple[int, ...]) -> Fraction:
        return block_control_exact(groups, VoteProfile(counts), n)

    if len(winner_voters) <= limit:
        prefix = [[0.0] + list(_accumulate(lst)) for lst in by_group]
        best_p, best_c = Fraction(-1), empty
        for counts in product(*(range(len(lst) + 1) for lst in by_group)):
            if sum(prefix[g][k] for g, k in enumerate(counts)) < margin:
                continue
            p = value(counts)
            if p > best_p:
                best_p, best_c = p, counts
        return MarginSearch(float(best_p), best_c, True)

    # greedy: strongest voters first, then try concentrating on few groups
    candidates = []
    flat = sorted(winner_voters, key=lambda v: -v.strength)
    candidates.append(_cover(flat, margin, groups.Sg))
    for g in range(groups.Sg):
        ordered = sorted(winner_voters, key=lambda v: (v.group != g, -v.strength))
        candidates.append(_cover(ordered, margin, groups.Sg))
    best_c = max(candidates, key=value)
    return MarginSearch(float(value(best_c)), best_c, False)


def support_margin_prob(
    groups: GroupProfile,
    winner_voters: Sequence[Voter],
    margin: float,
    n: int | None = None,
    limit: int = EXHAUSTIVE_VOTER_LIMIT,
) -> float:
    res = support_margin_search(groups, winner_voters, margin, n, limit)
    if not res.exhaustive:
        warnings.warn(
            f"{len(winner_voters)} voters exceed exhaustive bound {limit}; greedy lower bound used",
            CombinatorialCutoffWarning,
            stacklevel=2,
        )
    return res.prob


def _accumulate(xs: Sequence[float]) -> list[float]:
    out, acc = [], 0.0
    for x in xs:
        acc += x
        out.append(acc)
    return out


def _cover(order: Sequence[Voter], margin: float, Sg: int) -> tuple[int, ...]:
    counts = [0] * Sg
    acc = 0.0
    for v in order:
        if acc >= margin:
            break
        counts[v.group] += 1
        acc += v.strength
    return tuple(counts)
