"""Sharding coordinator: groups, chain restrictions, split/merge, assignment and crosschain moves.

Every function here is deterministic given its inputs. Randomness in the
protocol comes from hashes keyed by the global header root (MGBH), never from
a local generator.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .chaindata import (
    AssignmentBox,
    Block,
    BlockKind,
    ChainId,
    CrosschainEntry,
    DutyRange,
    GlobalBlockHeader,
    H,
    NewAssignJoin,
    NewJoin,
    Share,
    _u32,
    assignment_leaf,
    block_tag,
    chain_id_merge,
    crosschain_leaf,
    duty_range_merge,
    duty_range_split,
    hash_int,
    kind_at,
    merkle_branch,
    merkle_root,
    merkle_verify,
    xor_bytes,
)
from .mwpow import (
    COMMIT_SHARES,
    SHARE_FRACTION,
    ChainEngine,
    MinerRecord,
    canonical_order,
    countable_share_difficulty,
    share_difficulty,
)
from .security import DEFAULT_THRESHOLD, GroupProfile, VoteProfile, block_control_prob

SPLIT_FACTOR = 2
UNDERFILL_STREAK = 3
HALT_STREAK = 5
NO_FINAL_INTERVALS = 5
CROSSCHAIN_WINDOW = 3
MERGE_TIMEOUT = 3


@dataclass(frozen=True)
class ChainParams:
    K: int = 100
    Ti: int = 20
    Sg: int = 20
    Th: float = DEFAULT_THRESHOLD
    BI: float = 10.0
    qualification: float | None = None

    def __post_init__(self) -> None:
        if self.Ti <= 0 or self.Ti % 4:
            raise ValueError(f"lifelength Ti={self.Ti} must be a positive multiple of 4")
        if self.Sg < 1:
            raise ValueError("Sg must be at least 1")
        if not 0 < self.Th < 1:
            raise ValueError("Th must lie in (0, 1)")
        if self.K < 2:
            raise ValueError("K must be at least 2")

    @property
    def multiple(self) -> float:
        """PoW multiple a NewAssignJoin must reach over its intended difficulty."""
        return float(self.Ti if self.qualification is None else self.qualification)


@dataclass
class ChainState:
    id: ChainId
    engine: ChainEngine
    dutyRange: DutyRange
    pendingTx: deque = field(default_factory=deque)
    pendingNAJ: deque = field(default_factory=deque)
    historyIds: list[ChainId] = field(default_factory=list)
    latestFinalPabHash: bytes | None = None
    startHeight: int = 0
    # Bl_candidate of the latest finally accepted block, None before the first one
    acceptedBl: tuple[float, ...] | None = None
    najOf: dict[bytes, NewAssignJoin] = field(default_factory=dict)
    unacceptedStreak: int = 0
    intervalsSinceFinal: int = 0
    underfillStreak: int = 0

    @property
    def participants(self) -> list[MinerRecord]:
        return self.engine.participants()

    @property
    def height(self) -> int:
        return self.engine.height

    @property
    def trans_onhold(self) -> int:
        return len(self.pendingTx) + len(self.pendingNAJ)

    def claims(self) -> list[float]:
        return [m.cpClaim for m in self.participants]

    def position(self, height: int | None = None) -> int:
        return (self.height if height is None else height) - self.startHeight

    def kind(self, height: int | None = None) -> BlockKind:
        return kind_at(self.position(height))

    def record_acceptance(self, Sg: int) -> None:
        self.acceptedBl = bl_candidate(self.claims(), Sg)


@dataclass
class SystemState:
    chains: dict[ChainId, ChainState]
    globalHeader: GlobalBlockHeader
    params: ChainParams = field(default_factory=ChainParams)

    def live_ids(self) -> list[ChainId]:
        return sorted(self.chains)

    def total_nodes(self) -> int:
        return sum(len(c.engine.miners) for c in self.chains.values())

    def total_power(self) -> float:
        return sum(c.engine.registered_power for c in self.chains.values())

    def check_header(self) -> None:
        ids = sorted(c for c, _ in self.globalHeader.entries)
        if ids != self.live_ids():
            raise ValueError(f"global header lists {ids}, live chains are {self.live_ids()}")


# --- groups and restrictions ------------------------------------------------------------

def bl_candidate(claims: Sequence[float], Sg: int) -> tuple[float, ...]:
    """Lower claim boundary of each of the ``Sg`` groups within one chain."""
    rcp = sorted(claims)
    if not rcp:
        raise ValueError("a chain without participants has no group boundaries")
    npc = len(rcp)
    return tuple(rcp[math.floor(i * npc / Sg)] for i in range(Sg))


def compute_group_boundaries(state: SystemState | Iterable[ChainState], Sg: int | None = None) -> tuple[float, ...]:
    """System-wide boundaries: for each group the minimum over chains of their candidates."""
    chains = list(state.chains.values()) if isinstance(state, SystemState) else list(state)
    if Sg is None:
        if not isinstance(state, SystemState):
            raise ValueError("Sg is required when passing bare chains")
        Sg = state.params.Sg
    if not chains:
        raise ValueError("no live chains")
    cands = []
    for c in chains:
        if c.acceptedBl is None:
            raise ValueError(f"chain C{c.id} has no finally accepted block")
        if len(c.acceptedBl) != Sg:
            raise ValueError(f"chain C{c.id} reports {len(c.acceptedBl)} candidates, expected {Sg}")
        cands.append(c.acceptedBl)
    return tuple(min(col) for col in zip(*cands))


def group_of(claim: float, bl: Sequence[float]) -> int:
    """Group i with bl(i) <= claim < bl(i+1); claims below bl(0) fall in group 0."""
    return max(0, bisect.bisect_right(bl, claim) - 1)


def group_counts(claims: Iterable[float], bl: Sequence[float]) -> tuple[int, ...]:
    counts = [0] * len(bl)
    for c in claims:
        counts[group_of(c, bl)] += 1
    return tuple(counts)


def threshold_chainpower(claims: Sequence[float]) -> float:
    """Sum of the weakest claims RCP_0 .. RCP_floor(2/3 (NPC-1))."""
    rcp = sorted(claims)
    if not rcp:
        return 0.0
    last = math.floor(2 * (len(rcp) - 1) / 3)
    return float(sum(rcp[: last + 1]))


def system_profile(bl: Sequence[float], total_power: float, total_nodes: int) -> GroupProfile:
    """Worst-case adversary profile: half of all strength, n/Sg nodes per group."""
    Sg = len(bl)
    return GroupProfile(Sg, tuple(bl), total_power / 2, total_power, total_nodes // Sg)


class MergeReason(str, Enum):
    POWER_IMBALANCE = "power-imbalance"
    MISSING_GROUP = "missing-group"
    INSECURE = "insecure"
    UNDERFILL = "underfill"
    LOCAL_HALT = "local-halt"
    NO_FINAL = "no-final-block"


@dataclass(frozen=True)
class RestrictionVerdict:
    ok: bool
    reason: MergeReason | None = None
    prob: float | None = None

    def __bool__(self) -> bool:
        return self.ok


def _claims_of(chain: ChainState | Sequence[float]) -> list[float]:
    return chain.claims() if isinstance(chain, ChainState) else list(chain)


def check_chain_restrictions(
    chain: ChainState | Sequence[float],
    bl: Sequence[float],
    profile: GroupProfile | None = None,
    Th: float = DEFAULT_THRESHOLD,
) -> RestrictionVerdict:
    """Balance, group coverage and (when a profile is given) the all-voters security test."""
    claims = _claims_of(chain)
    if not claims:
        return RestrictionVerdict(False, MergeReason.MISSING_GROUP)
    if 2 * threshold_chainpower(claims) < sum(claims):
        return RestrictionVerdict(False, MergeReason.POWER_IMBALANCE)
    counts = group_counts(claims, bl)
    if any(k == 0 for k in counts):
        return RestrictionVerdict(False, MergeReason.MISSING_GROUP)
    if profile is None:
        return RestrictionVerdict(True)
    counts = tuple(min(k, profile.perGroupCount) for k in counts)
    p = block_control_prob(profile, VoteProfile(counts))
    if p > Th:
        return RestrictionVerdict(False, MergeReason.INSECURE, p)
    return RestrictionVerdict(True, None, p)


# --- split ----------------------------------------------------------------------------------

def split_participants(miners: Iterable[MinerRecord]) -> tuple[list[MinerRecord], list[MinerRecord]]:
    """Even ranks (ascending claim) to the even child, odd ranks to the odd child."""
    ranked = canonical_order(miners)
    return ranked[0::2], ranked[1::2]


def split_decision(
    chain: ChainState,
    bl: Sequence[float],
    params: ChainParams,
    profile: GroupProfile | None = None,
    others: Sequence[ChainState] | None = None,
) -> bool:
    """Split when the queue exceeds 2K and both offspring meet the restrictions.

    With ``others`` (the remaining live chains) the test uses the boundaries
    the system would have after the split, and also requires every other chain
    to stay within the restrictions under them.
    """
    if chain.trans_onhold <= SPLIT_FACTOR * params.K:
        return False
    even, odd = split_participants(chain.participants)
    halves = [[m.cpClaim for m in half] for half in (even, odd)]
    if not all(halves):
        return False
    if others is not None:
        bl, profile = _projected(halves, others, profile, params.Sg)
        if not all(check_chain_restrictions(c, bl, profile, params.Th) for c in others):
            return False
    return all(check_chain_restrictions(h, bl, profile, params.Th) for h in halves)


def _projected(halves, others, profile, Sg):
    """Boundaries and profile once the offspring replace their parent."""
    cands = [bl_candidate(h, Sg) for h in halves] + [c.acceptedBl for c in others if c.acceptedBl]
    bl = tuple(min(col) for col in zip(*cands))
    if profile is not None:
        profile = system_profile(bl, profile.totalStrength, profile.perGroupCount * Sg)
    return bl, profile


class SplitAborted(ValueError):
    pass


def split_chain(
    chain: ChainState,
    bl: Sequence[float],
    params: ChainParams,
    profile: GroupProfile | None = None,
    item_key=None,
    others: Sequence[ChainState] | None = None,
) -> tuple[ChainState, ChainState]:
    """Split into the two offspring chains; both start one height above the parent.

    ``item_key`` maps a pending item to its 32-byte routing hash (defaults to
    the item itself when it is a digest, else its ``id`` or hash), or to a
    (source chain, hash) pair when the governing key is known.
    """
    even, odd = split_participants(chain.participants)
    check_bl = bl
    if others is not None:
        check_bl, profile = _projected([[m.cpClaim for m in h] for h in (even, odd)], others, profile, params.Sg)
    for half in (even, odd):
        v = check_chain_restrictions([m.cpClaim for m in half], check_bl, profile, params.Th)
        if not v:
            raise SplitAborted(f"offspring of C{chain.id} would violate restrictions ({v.reason.value})")
    d_even, d_odd = duty_range_split(chain.dutyRange, chain.id)
    start = chain.height + 1
    kids = []
    for cid, members, duty in ((2 * chain.id, even, d_even), (2 * chain.id + 1, odd, d_odd)):
        eng = ChainEngine(chain.engine.BI, chain.engine.ad / 2, chain.engine.ed / 2)
        eng.height = start
        eng.register_many(members)
        kids.append(ChainState(
            id=cid, engine=eng, dutyRange=duty,
            historyIds=chain.historyIds + [chain.id], startHeight=start,
            acceptedBl=bl_candidate([m.cpClaim for m in members], params.Sg),
            najOf={m.identityKey: chain.najOf[m.identityKey] for m in members if m.identityKey in chain.najOf},
        ))
    key = item_key or _item_hash
    # pending items were all governed by the parent; the halves of its own keys decide
    parent_keys = chain.dutyRange.keys()
    table = {
        s: ([lo for lo, _ in ivs], ivs) for s, ivs in kids[0].dutyRange.segments.items()
    }

    def in_lower(source: ChainId, h: int) -> bool:
        if source not in table:
            return False
        lows, ivs = table[source]
        i = bisect.bisect_right(lows, h) - 1
        return i >= 0 and h <= ivs[i][1]

    for src, attr in ((chain.pendingTx, "pendingTx"), (chain.pendingNAJ, "pendingNAJ")):
        for item in src:
            k = key(item)
            if isinstance(k, tuple):
                h = k[1] if isinstance(k[1], int) else hash_int(k[1])
                lower = in_lower(k[0], h)
            else:
                h = hash_int(k)
                lower = any(in_lower(s, h) for s in parent_keys)
            getattr(kids[0] if lower else kids[1], attr).append(item)
    return kids[0], kids[1]


def _item_hash(item) -> bytes:
    if isinstance(item, bytes) and len(item) == 32:
        return item
    if hasattr(item, "id"):
        return item.id
    if hasattr(item, "hash"):
        return item.hash()
    raise TypeError(f"cannot route {type(item).__name__}")


# --- merge ------------------------------------------------------------------------------------

def merge_trigger(
    chain: ChainState,
    bl: Sequence[float],
    params: ChainParams,
    profile: GroupProfile | None = None,
) -> MergeReason | None:
    """First applicable reason for ``chain`` to seek a merge, or None."""
    if chain.underfillStreak >= UNDERFILL_STREAK:
        return MergeReason.UNDERFILL
    if chain.unacceptedStreak >= HALT_STREAK:
        return MergeReason.LOCAL_HALT
    if chain.intervalsSinceFinal >= NO_FINAL_INTERVALS:
        return MergeReason.NO_FINAL
    return check_chain_restrictions(chain, bl, profile, params.Th).reason


merge_triggers = merge_trigger


TRANS_ONHOLD_TOLERANCE = 0.1


def trans_onhold_plausible(reported: int, observed: int, tolerance: float = TRANS_ONHOLD_TOLERANCE) -> bool:
    """A validator builds on a block only if its self-reported queue length is close to its own view."""
    return abs(reported - observed) <= tolerance * max(observed, 1)


def note_interval(chain: ChainState, params: ChainParams, accepted: bool, sub_threshold: bool) -> None:
    """Update the streak counters used by the merge triggers after one block interval."""
    chain.intervalsSinceFinal = 0 if accepted else chain.intervalsSinceFinal + 1
    chain.unacceptedStreak = chain.unacceptedStreak + 1 if sub_threshold else 0
    if chain.trans_onhold * 2 < params.K:
        chain.underfillStreak += 1
    else:
        chain.underfillStreak = 0


def merge_target(cid: ChainId, live: Iterable[ChainId], exclude: Iterable[ChainId] = ()) -> ChainId | None:
    """Closest live chain id by integer distance, the smaller id on ties."""
    skip = set(exclude) | {cid}
    options = [c for c in live if c not in skip]
    if not options:
        return None
    return min(options, key=lambda c: (abs(c - cid), c))


def merge_groups(seeking: Mapping[ChainId, ChainId]) -> list[list[ChainId]]:
    """Chains linked by merge requests, as connected components (three or more may join)."""
    parent: dict[ChainId, ChainId] = {}

    def find(x: ChainId) -> ChainId:
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in seeking.items():
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps: dict[ChainId, list[ChainId]] = {}
    for x in list(parent):
        comps.setdefault(find(x), []).append(x)
    return sorted(sorted(c) for c in comps.values())


def merged_id(ids: Sequence[ChainId]) -> ChainId:
    """Fold sibling reunions first, then keep the smallest remaining id."""
    pool = sorted(set(ids))
    changed = True
    while changed and len(pool) > 1:
        changed = False
        for a in pool:
            if a ^ 1 in pool and a > 1:
                pool.remove(a)
                pool.remove(a ^ 1)
                pool.append(a >> 1)
                pool.sort()
                changed = True
                break
    out = pool[0]
    for x in pool[1:]:
        out = chain_id_merge(out, x)
    return out


def merge_approved(approvers: Iterable[MinerRecord], bl: Sequence[float], profile: GroupProfile, Th: float) -> bool:
    """Safe-number test: chance that every approving miner is adversarial is at most Th."""
    counts = group_counts((m.cpClaim for m in approvers), bl)
    if not any(counts):
        return False
    counts = tuple(min(k, profile.perGroupCount) for k in counts)
    return block_control_prob(profile, VoteProfile(counts)) <= Th


class MergePending(RuntimeError):
    pass


def merge_chains(
    chains: Sequence[ChainState],
    approvers: Iterable[MinerRecord] | None = None,
    bl: Sequence[float] | None = None,
    profile: GroupProfile | None = None,
    Th: float = DEFAULT_THRESHOLD,
    Sg: int | None = None,
) -> ChainState:
    """Merge two or more chains into one.

    With ``profile`` given, the merge only completes when the approving miners
    pass the safe-number test; otherwise MergePending is raised.
    """
    if len(chains) < 2:
        raise ValueError("a merge needs at least two chains")
    if profile is not None:
        if bl is None:
            raise ValueError("bl is required for the approval test")
        voters = list(approvers) if approvers is not None else [m for c in chains for m in c.participants]
        if not merge_approved(voters, bl, profile, Th):
            raise MergePending("approving miners do not reach the safe number")
    duty = chains[0].dutyRange
    for c in chains[1:]:
        duty = duty_range_merge(duty, c.dutyRange)
    start = max(c.height for c in chains) + 1
    first = chains[0].engine
    eng = ChainEngine(first.BI, sum(c.engine.ad for c in chains), sum(c.engine.ed for c in chains))
    eng.height = start
    naj: dict[bytes, NewAssignJoin] = {}
    history: list[ChainId] = []
    for c in chains:
        eng.register_many(c.participants)
        naj.update(c.najOf)
        history.extend(x for x in c.historyIds + [c.id] if x not in history)
    cid = merged_id([c.id for c in chains])
    merged = ChainState(
        id=cid, engine=eng, dutyRange=duty, historyIds=[h for h in history if h != cid],
        startHeight=start, najOf=naj,
    )
    for c in chains:
        merged.pendingTx.extend(c.pendingTx)
        merged.pendingNAJ.extend(c.pendingNAJ)
    if Sg is not None and eng.miners:
        merged.acceptedBl = bl_candidate(merged.claims(), Sg)
    return merged


@dataclass
class MergeCoordinator:
    """Tracks outstanding merge requests; escalates to the next-closest chain on timeout."""

    timeout: int = MERGE_TIMEOUT
    targets: dict[ChainId, ChainId] = field(default_factory=dict)
    age: dict[ChainId, int] = field(default_factory=dict)
    tried: dict[ChainId, set[ChainId]] = field(default_factory=dict)

    def request(self, cid: ChainId, live: Iterable[ChainId]) -> ChainId | None:
        if cid in self.targets:
            return self.targets[cid]
        t = merge_target(cid, live, self.tried.get(cid, ()))
        if t is not None:
            self.targets[cid] = t
            self.age[cid] = 0
        return t

    def tick(self, live: Iterable[ChainId]) -> list[ChainId]:
        """Age pending requests; returns chains whose target was replaced."""
        live = list(live)
        escalated = []
        for cid in list(self.targets):
            if cid not in live:
                self.drop(cid)
                continue
            self.age[cid] += 1
            if self.age[cid] > self.timeout or self.targets[cid] not in live:
                self.tried.setdefault(cid, set()).add(self.targets.pop(cid))
                if self.request(cid, live) is not None:
                    escalated.append(cid)
        return escalated

    def groups(self) -> list[list[ChainId]]:
        return merge_groups(self.targets)

    def drop(self, cid: ChainId) -> None:
        self.targets.pop(cid, None)
        self.age.pop(cid, None)
        self.tried.pop(cid, None)


# --- power assignment block -------------------------------------------------------------

def shuffle_key(mgbh: bytes, item_hash: bytes) -> bytes:
    return H(xor_bytes(mgbh, H(item_hash)))


def mgbh_shuffle(hashes: Sequence[bytes], mgbh: bytes) -> list[bytes]:
    """Re-rank items by H(MGBH xor H(item)), alphabetically (bytewise)."""
    return sorted(hashes, key=lambda h: shuffle_key(mgbh, h))


def reassignment_section(
    psl: Sequence[NewAssignJoin],
    mgbh: bytes,
    ranked_ids: Sequence[ChainId],
) -> tuple[tuple[ChainId, tuple[bytes, ...]], ...]:
    """Bucket retiring members to chains: PSL_j goes to chain (hash(PSL_j) + j) mod NC."""
    nc = len(ranked_ids)
    if nc == 0 or not psl:
        return ()
    ordered = sorted(psl, key=lambda n: (n.intendedDifficulty, n.hash()))
    shuffled = mgbh_shuffle([n.hash() for n in ordered], mgbh)
    buckets: dict[ChainId, list[bytes]] = {}
    for j, h in enumerate(shuffled):
        dest = ranked_ids[(hash_int(h) + j) % nc]
        buckets.setdefault(dest, []).append(h)
    return tuple((c, tuple(v)) for c, v in buckets.items())


def naj_eligible(naj: NewAssignJoin, expected_prev: bytes | None, multiple: float) -> bool:
    if expected_prev is not None and naj.hashPrevBlock != expected_prev:
        return False
    return naj.qualifies(multiple)


def select_new_participants(najs: Iterable[NewAssignJoin], bl: Sequence[float], K: int) -> list[NewAssignJoin]:
    """Steps 1-3: bucket by intended difficulty, rank by closeness to the group middle, take K/Sg each."""
    Sg = len(bl)
    lists: list[list[NewAssignJoin]] = [[] for _ in range(Sg)]
    for n in najs:
        if n.intendedDifficulty < bl[0]:
            continue
        lists[group_of(n.intendedDifficulty, bl)].append(n)
    per = K // Sg
    chosen = []
    for i, lst in enumerate(lists):
        upper = bl[i + 1] if i + 1 < Sg else bl[Sg - 1]
        tt = (upper + bl[i]) / 2
        lst.sort(key=lambda n: (abs(n.intendedDifficulty - tt), n.hash()))
        chosen.extend(lst[:per])
    return chosen


def prune_front_third(selected: Sequence[NewAssignJoin]) -> list[NewAssignJoin]:
    """Step 4: drop the strongest until the front third holds at most half the power."""
    rest = sorted(selected, key=lambda n: (-n.intendedDifficulty, n.hash()))
    while rest:
        front = math.ceil(len(rest) / 3)
        if 2 * sum(n.intendedDifficulty for n in rest[:front]) <= sum(n.intendedDifficulty for n in rest):
            break
        rest.pop(0)
    return rest


def prune_claims(claims: Sequence[float]) -> list[float]:
    """Claim-only version of the step-4 prune, for inspection."""
    rest = sorted(claims, reverse=True)
    while rest:
        front = math.ceil(len(rest) / 3)
        if 2 * sum(rest[:front]) <= sum(rest):
            break
        rest.pop(0)
    return rest


def new_participant_section(
    selected: Sequence[NewAssignJoin], mgbh: bytes, nc: int, K: int
) -> tuple[tuple[tuple[bytes, int], ...], ...]:
    """Steps 5-6: alphabetical order, MGBH shuffle, then round-robin into min(NC, K) subsections."""
    if not selected:
        return ()
    by_hash = {n.hash(): n for n in selected}
    shuffled = mgbh_shuffle(sorted(by_hash), mgbh)
    width = min(nc, K)
    subs: list[list[tuple[bytes, int]]] = [[] for _ in range(width)]
    for i, h in enumerate(shuffled):
        subs[i % width].append((h, by_hash[h].intendedDifficulty))
    while subs and not subs[-1]:
        subs.pop()
    return tuple(tuple(s) for s in subs)


def retiring_members(chain: ChainState, height: int, Ti: int) -> list[MinerRecord]:
    """Members that would pass Ti iterations before the next Fub after this one."""
    cutoff = height + 6 - Ti
    return [m for m in chain.participants if m.joinHeight < cutoff]


def form_pab(
    chain: ChainState,
    mgbh: bytes,
    *,
    bl: Sequence[float],
    ranked_ids: Sequence[ChainId],
    params: ChainParams,
    expected_prev: bytes | None = None,
    height: int | None = None,
) -> AssignmentBox:
    """Assignment box of the Pab at ``height`` (defaults to the chain's current height)."""
    h = chain.height if height is None else height
    if chain.kind(h) is not BlockKind.PAB:
        raise ValueError(f"height {h} of C{chain.id} is not a Pab height")
    psl = [chain.najOf[m.identityKey] for m in retiring_members(chain, h, params.Ti) if m.identityKey in chain.najOf]
    reassign = reassignment_section(psl, mgbh, ranked_ids)
    eligible = [n for n in chain.pendingNAJ if naj_eligible(n, expected_prev, params.multiple)]
    chosen = prune_front_third(select_new_participants(eligible, bl, params.K))
    section = new_participant_section(chosen, mgbh, len(ranked_ids), params.K)
    return AssignmentBox(section, reassign, capacity=params.K)


def subsection_destination(pab_hash: bytes, mgbh: bytes, ll: int, ranked_ids: Sequence[ChainId]) -> ChainId:
    """Chain receiving subsection ``ll`` of a Pab's new-participant section."""
    if not ranked_ids:
        raise ValueError("no chains to assign to")
    return ranked_ids[hash_int(H(pab_hash + mgbh + _u32(ll))) % len(ranked_ids)]


def assignment_plan(box: AssignmentBox, pab_hash: bytes, mgbh: bytes, ranked_ids: Sequence[ChainId]) -> dict[bytes, ChainId]:
    """NAJ hash -> destination chain for every new participant and reassigned member."""
    plan = {h: subsection_destination(pab_hash, mgbh, ll, ranked_ids) for h, ll, _ in box.entries()}
    for cid, hashes in box.reassignmentSection:
        for h in hashes:
            plan[h] = cid
    return plan


def make_new_join(box: AssignmentBox, naj: NewAssignJoin, pab_hash: bytes, assigning: ChainId) -> NewJoin:
    ll, d, branch = box.branch_for(naj.hash())
    return NewJoin(ll, d, assigning, pab_hash, tuple(branch))


class AssignmentReject(str, Enum):
    BAD_PROOF = "bad-proof"
    WRONG_DESTINATION = "wrong-destination"
    STALE_PAB = "stale-pab"
    REPLAY = "replay"


@dataclass(frozen=True)
class AssignmentVerdict:
    valid: bool
    reason: AssignmentReject | None = None

    def __bool__(self) -> bool:
        return self.valid


def verify_assignment(
    new_join: NewJoin,
    naj: NewAssignJoin,
    pab: Block,
    mgbh: bytes,
    ranked_ids: Sequence[ChainId],
    verifier: ChainId,
    latest_final_pab: bytes | None,
    used: set[bytes] | None = None,
) -> AssignmentVerdict:
    """Check a New Join presented to chain ``verifier``; records it in ``used`` when valid."""
    if used is not None and new_join.key() in used:
        return AssignmentVerdict(False, AssignmentReject.REPLAY)
    pab_hash = pab.hash()
    box = pab.assignmentBox
    if box is None or new_join.blockHeaderHash != pab_hash:
        return AssignmentVerdict(False, AssignmentReject.BAD_PROOF)
    leaf = assignment_leaf(naj.hash(), new_join.ll, new_join.intendedDifficulty)
    if naj.intendedDifficulty != new_join.intendedDifficulty or not merkle_verify(
        leaf, new_join.merkleBranch, box.new_participant_root()
    ):
        return AssignmentVerdict(False, AssignmentReject.BAD_PROOF)
    if latest_final_pab is None or pab_hash != latest_final_pab:
        return AssignmentVerdict(False, AssignmentReject.STALE_PAB)
    if subsection_destination(pab_hash, mgbh, new_join.ll, ranked_ids) != verifier:
        return AssignmentVerdict(False, AssignmentReject.WRONG_DESTINATION)
    if used is not None:
        used.add(new_join.key())
    return AssignmentVerdict(True)


# --- fuel-up block --------------------------------------------------------------------------

@dataclass
class FubResult:
    added: list[MinerRecord]
    adjusted: dict[bytes, float]
    mustMerge: bool


def form_fub_and_adjust(
    chain: ChainState,
    new_joins: Sequence[tuple[NewJoin, NewAssignJoin]],
    bl: Sequence[float],
    height: int | None = None,
) -> FubResult:
    """Admit validated New Joins, clipping top-group newcomers if the balance test breaks."""
    h = chain.height if height is None else height
    added = []
    for nj, naj in new_joins:
        m = MinerRecord(naj.identityKey, float(nj.intendedDifficulty), naj.walletAddress, joinHeight=h)
        added.append(m)
        chain.najOf[naj.identityKey] = naj
    adjusted: dict[bytes, float] = {}
    claims = chain.claims() + [m.cpClaim for m in added]
    top = len(bl) - 1
    if 2 * threshold_chainpower(claims) < sum(claims):
        for m in added:
            if group_of(m.cpClaim, bl) == top and m.cpClaim > bl[top]:
                adjusted[m.identityKey] = bl[top]
                m.cpClaim = float(bl[top])
        claims = chain.claims() + [m.cpClaim for m in added]
    chain.engine.register_many(added)
    return FubResult(added, adjusted, 2 * threshold_chainpower(claims) < sum(claims))


# --- crosschain transfer ----------------------------------------------------------------

class TransferStatus(str, Enum):
    REQUESTED = "requested"
    TRANSFERRED = "transferred"
    REJECTED = "rejected"
    CANCELLED = "cancelled"
    PENDING_COMPLETE = "pending-complete"


@dataclass
class Transfer:
    txId: bytes
    origin: ChainId
    dest: ChainId
    requestHeight: int
    request: CrosschainEntry
    proof: tuple[bytes, ...] = ()
    root: bytes = b""
    confirmHeight: int | None = None
    status: TransferStatus = TransferStatus.REQUESTED


def request_transfer(
    origin: ChainState,
    dest: ChainId,
    tx_id: bytes,
    height: int,
    section: list[CrosschainEntry] | None = None,
    source: ChainId | None = None,
) -> Transfer:
    """Write a request into the origin's crosschain section at ``height``.

    ``source`` is the chain whose blocks hold the transaction's inputs
    (the origin itself by default).
    """
    if not origin.dutyRange.governs(origin.id if source is None else source, hash_int(tx_id)):
        raise ValueError(f"C{origin.id} does not govern this transaction")
    entry = CrosschainEntry("request", tx_id, origin.id, dest)
    sec = list(section or []) + [entry]
    leaves = [crosschain_leaf(e) for e in sec]
    idx = len(sec) - 1
    return Transfer(tx_id, origin.id, dest, height, entry, tuple(merkle_branch(leaves, idx)), merkle_root(leaves))


def confirm_transfer(t: Transfer, dest_height: int, spendable: set[bytes] | None = None) -> TransferStatus:
    """Destination embeds the confirm; valid only within the height window."""
    if not merkle_verify(crosschain_leaf(t.request), t.proof, t.root):
        t.status = TransferStatus.REJECTED
        return t.status
    if dest_height - t.requestHeight < CROSSCHAIN_WINDOW:
        t.confirmHeight = dest_height
        t.status = TransferStatus.TRANSFERRED
        if spendable is not None:
            spendable.add(t.txId)
    else:
        t.status = TransferStatus.REJECTED
    return t.status


def cancel_transfer(t: Transfer, origin_height: int, dest_sections: Iterable[Iterable[CrosschainEntry]]) -> TransferStatus:
    """Origin cancels only after the window lapsed and no confirm is in the destination."""
    if origin_height - t.requestHeight < CROSSCHAIN_WINDOW:
        return t.status
    confirmed = any(e.kind == "confirm" and e.txId == t.txId for sec in dest_sections for e in sec)
    if confirmed and t.status is TransferStatus.TRANSFERRED:
        return t.status
    if not confirmed:
        t.status = TransferStatus.CANCELLED
    return t.status


def crosschain_transfer(
    origin: ChainState,
    dest: ChainState,
    tx_id: bytes,
    request_height: int,
    confirm_height: int | None = None,
    cancel_at: int | None = None,
) -> TransferStatus:
    """Run one transfer end to end and report its final status."""
    t = request_transfer(origin, dest.id, tx_id, request_height)
    sections: list[list[CrosschainEntry]] = []
    if confirm_height is not None:
        if confirm_transfer(t, confirm_height) is TransferStatus.TRANSFERRED:
            sections.append([CrosschainEntry("confirm", tx_id, origin.id, dest.id, t.proof)])
    if cancel_at is not None:
        return cancel_transfer(t, cancel_at, sections)
    if t.status is TransferStatus.REQUESTED:
        return TransferStatus.PENDING_COMPLETE
    return t.status


# --- dispute resolution ---------------------------------------------------------------------

@dataclass(frozen=True)
class DisputeCandidate:
    blockHash: bytes
    height: int
    shares: tuple[tuple[bytes, Share], ...]
    globalHeaderOk: bool = True


class DisputeOutcome(str, Enum):
    RESOLVED = "resolved"
    UNRESOLVED = "unresolved"


@dataclass(frozen=True)
class DisputeResult:
    outcome: DisputeOutcome
    winner: bytes | None
    support: dict[bytes, float]


def registered_support(candidate: DisputeCandidate, members: Mapping[bytes, MinerRecord]) -> float:
    """Countable difficulty from valid shares: registered key, nonce in range, enough difficulty."""
    per_miner: dict[bytes, list[float]] = {}
    tag = block_tag(candidate.blockHash)
    for key, share in candidate.shares:
        m = members.get(key)
        if m is None or share.blockTag != tag or not share.verify(key):
            continue
        lo, hi = m.tryRange
        if not lo <= share.nonce < hi:
            continue
        d = share_difficulty(candidate.blockHash, share.nonce)
        if d < SHARE_FRACTION * m.cpClaim:
            continue
        per_miner.setdefault(key, []).append(d)
    return sum(
        countable_share_difficulty(ds, members[k].cpClaim)
        for k, ds in per_miner.items()
        if len(ds) >= COMMIT_SHARES
    )


def resolve_dispute(candidates: Sequence[DisputeCandidate], participants: Iterable[MinerRecord]) -> DisputeResult:
    """Pick the block backed by a majority of registered power at the last agreed participant list."""
    members = {m.identityKey: m for m in participants}
    registered = sum(m.cpClaim for m in members.values())
    support = {
        c.blockHash: (registered_support(c, members) if c.globalHeaderOk else 0.0)
        for c in candidates
    }
    best = max(candidates, key=lambda c: (support[c.blockHash], c.blockHash), default=None)
    if best is None or not support[best.blockHash] > registered / 2:
        return DisputeResult(DisputeOutcome.UNRESOLVED, None, support)
    return DisputeResult(DisputeOutcome.RESOLVED, best.blockHash, support)
