"""Per-chain multiple-winner proof-of-work consensus engine.

Miners register a power claim, receive an exclusive nonce interval (try range)
proportional to it, and vote for blocks by sending low-difficulty shares.
Shares decide support, finality and the reward split.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .chaindata import (
    HASH_SPACE,
    Block,
    H,
    Share,
    block_tag,
    difficulty_of,
    int_hash,
    sign,
)

SHARE_QUOTA = 4
SHARE_FRACTION = 0.25
COMMIT_SHARES = 2
FINALITY_MARGIN = 0.25
STATEMENT_MAJORITY = 0.5
EXPEL_MIN_SHARES = 3
EXPEL_WEIGHT = 0.5
SEEN_FRACTION = Fraction(9, 10)
REWARD_UNIT = Fraction(1, 10**6)


class DegenerateTimestampWarning(RuntimeWarning):
    """Consecutive block timestamps did not increase; the interval was clamped."""


# --- miners and try ranges ----------------------------------------------------------

@dataclass
class MinerRecord:
    identityKey: bytes
    cpClaim: float
    wallet: bytes = b""
    tryRange: tuple[int, int] = (0, 0)
    joinHeight: int = 0
    lifeCounter: int = 0
    # height -> list of (target block hash, share difficulty)
    sharesThisRound: dict[int, list[tuple[bytes, float]]] = field(default_factory=dict)
    # height -> block hash the miner is committed to
    committedBlock: dict[int, bytes] = field(default_factory=dict)
    adversary: bool = False

    def shares_at(self, height: int) -> list[tuple[bytes, float]]:
        return self.sharesThisRound.get(height, [])

    def forget_before(self, height: int) -> None:
        for h in [h for h in self.sharesThisRound if h < height]:
            del self.sharesThisRound[h]
        for h in [h for h in self.committedBlock if h < height]:
            del self.committedBlock[h]


def canonical_order(miners: Iterable[MinerRecord]) -> list[MinerRecord]:
    """Ascending claim, ties broken by identity key bytes."""
    return sorted(miners, key=lambda m: (m.cpClaim, m.identityKey))


def try_range_bounds(claims: Sequence[float]) -> list[int]:
    """Cumulative boundaries b_0=0 < ... < b_n=2^256 with widths proportional to claims."""
    fr = [Fraction(c) for c in claims]
    if any(c <= 0 for c in fr):
        raise ValueError("every power claim must be positive")
    total = sum(fr)
    bounds, acc = [0], Fraction(0)
    for c in fr:
        acc += c
        bounds.append(math.floor(acc * HASH_SPACE / total))
    bounds[-1] = HASH_SPACE
    return bounds


def assign_try_ranges(miners: Iterable[MinerRecord]) -> list[MinerRecord]:
    """Give each miner its half-open nonce interval; returns miners in canonical order."""
    ordered = canonical_order(miners)
    if not ordered:
        return []
    bounds = try_range_bounds([m.cpClaim for m in ordered])
    for m, lo, hi in zip(ordered, bounds, bounds[1:]):
        m.tryRange = (lo, hi)
    return ordered


# --- difficulty adaptation --------------------------------------------------------------

def update_acceptance_difficulty(prevAD: float, tsPrev: float, tsPrevPrev: float, BI: float) -> float:
    elapsed = tsPrev - tsPrevPrev
    if elapsed <= 0:
        warnings.warn(
            f"non-increasing timestamps ({tsPrevPrev} -> {tsPrev}); interval clamped to 1",
            DegenerateTimestampWarning,
            stacklevel=2,
        )
        elapsed = 1
    return BI * prevAD / elapsed


def update_entrance_difficulty(prevED: float, NEprev: int, newAD: float, DN: int = 1) -> float:
    if NEprev < 0:
        raise ValueError("NE must be non-negative")
    # with no block at the entrance level last round, halve instead of collapsing to zero
    grown = prevED / 2 if NEprev == 0 else NEprev / DN * prevED
    return min(grown, newAD / 2)


# --- shares ---------------------------------------------------------------------------

class ShareReject(str, Enum):
    OUT_OF_RANGE = "out-of-range"
    INSUFFICIENT_DIFFICULTY = "insufficient-difficulty"
    BAD_SIGNATURE = "bad-signature"
    QUOTA = "quota"
    BRANCH_SWITCH = "branch-switch"


@dataclass(frozen=True)
class ShareVerdict:
    accepted: bool
    reason: ShareReject | None = None
    difficulty: float = 0.0

    def __bool__(self) -> bool:
        return self.accepted


def share_hash(block_hash: bytes, nonce: int) -> bytes:
    return H(block_hash + int_hash(nonce))


def share_difficulty(block_hash: bytes, nonce: int) -> float:
    return difficulty_of(share_hash(block_hash, nonce))


def make_share(block_hash: bytes, nonce: int, identity_key: bytes) -> Share:
    return Share.create(block_hash, nonce, identity_key)


def validate_share(share: Share, miner: MinerRecord, block: Block | bytes, height: int) -> ShareVerdict:
    """Check one share against a miner's record without recording it."""
    block_hash = block if isinstance(block, bytes) else block.hash()
    lo, hi = miner.tryRange
    if not lo <= share.nonce < hi:
        return ShareVerdict(False, ShareReject.OUT_OF_RANGE)
    # the signature covers the tag of the block the validator expects
    expected = sign(miner.identityKey, Share.message(block_tag(block_hash), share.nonce))
    if share.signature != expected:
        return ShareVerdict(False, ShareReject.BAD_SIGNATURE)
    d = share_difficulty(block_hash, share.nonce)
    if d < SHARE_FRACTION * miner.cpClaim:
        return ShareVerdict(False, ShareReject.INSUFFICIENT_DIFFICULTY, d)
    prior = miner.shares_at(height)
    if len(prior) >= SHARE_QUOTA:
        return ShareVerdict(False, ShareReject.QUOTA, d)
    committed = miner.committedBlock.get(height)
    if committed is not None and committed != block_hash:
        return ShareVerdict(False, ShareReject.BRANCH_SWITCH, d)
    return ShareVerdict(True, None, d)


def record_share(miner: MinerRecord, height: int, block_hash: bytes, difficulty: float) -> None:
    lst = miner.sharesThisRound.setdefault(height, [])
    lst.append((block_hash, difficulty))
    if height not in miner.committedBlock:
        if sum(1 for b, _ in lst if b == block_hash) >= COMMIT_SHARES:
            miner.committedBlock[height] = block_hash


def submit_share(share: Share, miner: MinerRecord, block: Block | bytes, height: int) -> ShareVerdict:
    verdict = validate_share(share, miner, block, height)
    if verdict.accepted:
        block_hash = block if isinstance(block, bytes) else block.hash()
        record_share(miner, height, block_hash, verdict.difficulty)
    return verdict


def countable_share_difficulty(difficulties: Sequence[float], cpClaim: float) -> float:
    """Support a miner lends a block: nothing below two shares, and never above its claim."""
    if len(difficulties) < COMMIT_SHARES:
        return 0.0
    return min(float(sum(difficulties)), float(cpClaim))


def miner_countable(miner: MinerRecord, height: int, block_hash: bytes) -> float:
    ds = [d for b, d in miner.shares_at(height) if b == block_hash]
    return countable_share_difficulty(ds, miner.cpClaim)


def is_conforming(miner: MinerRecord, height: int) -> bool:
    """Sent two valid shares for one block at ``height`` and never strayed from it."""
    committed = miner.committedBlock.get(height)
    if committed is None:
        return False
    return all(b == committed for b, _ in miner.shares_at(height))


# --- branch ledger ------------------------------------------------------------------

@dataclass
class BlockNode:
    hash: bytes
    parent: bytes | None
    height: int
    announced: bool = False
    sd: float = 0.0
    children: list[bytes] = field(default_factory=list)


class NoSharesYet(ValueError):
    """Support rate requested where no countable share exists at that height."""


class BranchLedger:
    """Block tree with countable share difficulty per block."""

    def __init__(self) -> None:
        self.nodes: dict[bytes, BlockNode] = {}
        self.by_height: dict[int, list[bytes]] = {}

    def add_block(self, h: bytes, parent: bytes | None, height: int, announced: bool = False, sd: float = 0.0) -> BlockNode:
        if h in self.nodes:
            raise ValueError("block already in ledger")
        if parent is not None and parent not in self.nodes:
            raise KeyError("unknown parent block")
        node = BlockNode(h, parent, height, announced, sd)
        self.nodes[h] = node
        self.by_height.setdefault(height, []).append(h)
        if parent is not None:
            self.nodes[parent].children.append(h)
        return node

    def add_support(self, h: bytes, sd: float) -> None:
        self.nodes[h].sd += sd

    def announce(self, h: bytes) -> None:
        self.nodes[h].announced = True

    def branch_sd(self, h: bytes) -> float:
        node = self.nodes[h]
        return node.sd + sum(self.branch_sd(c) for c in node.children)

    def support_rate(self, h: bytes) -> float:
        node = self.nodes[h]
        denom = sum(self.branch_sd(x) for x in self.by_height[node.height])
        if denom <= 0:
            raise NoSharesYet(f"no countable shares at height {node.height}")
        return self.branch_sd(h) / denom

    def rivals(self, h: bytes) -> list[bytes]:
        node = self.nodes[h]
        return [x for x in self.by_height[node.height] if x != h]

    def roots(self) -> list[bytes]:
        return [h for h, n in self.nodes.items() if n.parent is None]

    def heaviest_path(self) -> list[bytes]:
        """Mainchain tip path: at every fork follow the branch with the most support."""
        level = sorted(self.roots())
        path: list[bytes] = []
        while level:
            best = max(level, key=lambda x: (self.branch_sd(x), _neg(x)))
            path.append(best)
            level = self.nodes[best].children
        return path

    def latest_height(self) -> int:
        return max(self.by_height) if self.by_height else 0


def _neg(h: bytes) -> bytes:
    # lower hash wins ties under max()
    return bytes(255 - b for b in h)


def support_rate(ledger: BranchLedger, block_hash: bytes) -> float:
    return ledger.support_rate(block_hash)


# --- statement rate and finality ----------------------------------------------------------

@dataclass
class RoundState:
    height: int
    entranceDifficulty: float
    acceptanceDifficulty: float
    registeredPower: float
    candidates: set[bytes] = field(default_factory=set)
    announced: set[bytes] = field(default_factory=set)
    conformingPower: float = 0.0

    def __post_init__(self) -> None:
        if not self.announced <= self.candidates:
            self.candidates |= self.announced


def statement_rate(round_state: RoundState | None = None, *, conforming: float | None = None, registered: float | None = None) -> float:
    """Share of registered power that cast two valid, non-switching shares."""
    if round_state is not None:
        conforming, registered = round_state.conformingPower, round_state.registeredPower
    if registered is None or registered <= 0:
        raise ValueError("registered power must be positive")
    return float(conforming) / float(registered)


def conforming_power(miners: Iterable[MinerRecord], height: int) -> float:
    return float(sum(m.cpClaim for m in miners if is_conforming(m, height)))


class SecurityOracle(Protocol):
    threshold: float

    def control_prob(self, block_hash: bytes) -> float: ...

    def margin_prob(self, winner: bytes, rival: bytes, margin: float) -> float: ...


class Finality(str, Enum):
    ACCEPTED = "finallyAccepted"
    PENDING = "pending"


def _passes_security(ledger: BranchLedger, h: bytes, security: SecurityOracle | None) -> bool:
    if security is None:
        return True
    th = security.threshold
    if security.control_prob(h) > th:
        return False
    mine = ledger.branch_sd(h)
    for r in ledger.rivals(h):
        if ledger.nodes[r].announced and security.control_prob(r) <= th:
            # both are plausible; the gap itself must be beyond adversary reach
            margin = mine - ledger.branch_sd(r)
            if margin <= 0 or security.margin_prob(h, r, margin) > th:
                return False
    return True


def decisive(ledger: BranchLedger, h: bytes, registered: float, security: SecurityOracle | None = None) -> bool:
    """Conditions (announced, support gap, security) for ``h`` on its own."""
    node = ledger.nodes[h]
    if not node.announced:
        return False
    second = max((ledger.branch_sd(r) for r in ledger.rivals(h)), default=0.0)
    if not ledger.branch_sd(h) > second + FINALITY_MARGIN * registered:
        return False
    return _passes_security(ledger, h, security)


def finalize_block(
    ledger: BranchLedger,
    block_hash: bytes,
    latest_statement_rate: float,
    registered: float,
    security: SecurityOracle | None = None,
) -> Finality:
    """Finality of one block.

    A block is final when it is announced on the heaviest path, the latest
    height has a statement-rate majority, and either it or a descendant on the
    heaviest path clears the support gap and the security test (finality of a
    block covers its ancestors).
    """
    path = ledger.heaviest_path()
    if block_hash not in path or not ledger.nodes[block_hash].announced:
        return Finality.PENDING
    if not latest_statement_rate > STATEMENT_MAJORITY:
        return Finality.PENDING
    for h in path[path.index(block_hash):]:
        if decisive(ledger, h, registered, security):
            return Finality.ACCEPTED
    return Finality.PENDING


def finalized_blocks(ledger: BranchLedger, latest_statement_rate: float, registered: float, security: SecurityOracle | None = None) -> list[bytes]:
    return [
        h for h in ledger.heaviest_path()
        if finalize_block(ledger, h, latest_statement_rate, registered, security) is Finality.ACCEPTED
    ]


# --- rewards --------------------------------------------------------------------------

def distribute_rewards(contributions: Sequence[tuple[bytes, float]], total_reward: float, unit: Fraction = REWARD_UNIT) -> list[tuple[bytes, float]]:
    """Split ``total_reward`` in proportion to share difficulty, rounded down to ``unit``.

    Rounding leftovers go to the largest contributor so the payouts sum to the
    reward exactly (in units).
    """
    live = [(w, Fraction(sd)) for w, sd in contributions if sd > 0]
    if not live:
        return []
    total_sd = sum(sd for _, sd in live)
    R = Fraction(total_reward)
    units = [math.floor(sd / total_sd * R / unit) for _, sd in live]
    leftover = math.floor(R / unit) - sum(units)
    top = max(range(len(live)), key=lambda i: (live[i][1], -i))
    units[top] += leftover
    return [(w, float(u * unit)) for (w, _), u in zip(live, units)]


# --- expulsion ------------------------------------------------------------------------

def end_of_round_expulsion(embedded: Mapping[bytes, Sequence[float]], claims: Mapping[bytes, float]) -> set[bytes]:
    """Miners whose embedded shares were too few or too light to keep their place."""
    expelled = set()
    for key, claim in claims.items():
        ds = embedded.get(key, ())
        if len(ds) < EXPEL_MIN_SHARES or sum(ds) <= EXPEL_WEIGHT * claim:
            expelled.add(key)
    return expelled


# --- block validation ---------------------------------------------------------------------

class BlockReject(str, Enum):
    DOUBLE_SPEND = "double-spend"
    UNKNOWN_INPUT = "unknown-input"
    OUT_OF_DUTY = "out-of-duty-range"
    INVALID_SHARE = "invalid-share"
    INVALID_NEW_JOIN = "invalid-new-join"
    UNKNOWN_CONTENT = "unknown-content"
    OVER_LIMIT = "over-chain-limit"


@dataclass
class LocalState:
    """What a validator knows when a block arrives."""

    unspent: set[bytes] = field(default_factory=set)
    spent: set[bytes] = field(default_factory=set)
    seen_shares: set[bytes] = field(default_factory=set)
    seen_new_joins: set[bytes] = field(default_factory=set)
    in_duty: Callable[[bytes], bool] = lambda tx_id: True
    share_ok: Callable[[Share], bool] = lambda s: True
    new_join_ok: Callable[[object], bool] = lambda nj: True
    chain_limit: int | None = None


@dataclass(frozen=True)
class BlockVerdict:
    accepted: bool
    reasons: tuple[BlockReject, ...] = ()

    def __bool__(self) -> bool:
        return self.accepted


def share_key(s: Share) -> bytes:
    return H(s.encode())


def validate_block(block: Block, local: LocalState) -> BlockVerdict:
    reasons: list[BlockReject] = []
    if local.chain_limit is not None and len(block.transactions) > local.chain_limit:
        reasons.append(BlockReject.OVER_LIMIT)
    used: set[bytes] = set()
    for tx in block.transactions:
        if not local.in_duty(tx.id):
            reasons.append(BlockReject.OUT_OF_DUTY)
        for i in tx.inputs:
            if i in local.spent or i in used:
                reasons.append(BlockReject.DOUBLE_SPEND)
            elif i not in local.unspent:
                reasons.append(BlockReject.UNKNOWN_INPUT)
            used.add(i)
    if any(not local.share_ok(s) for s in block.shares):
        reasons.append(BlockReject.INVALID_SHARE)
    if any(not local.new_join_ok(nj) for nj, _ in block.newJoins):
        reasons.append(BlockReject.INVALID_NEW_JOIN)
    total = len(block.shares) + len(block.newJoins)
    if total:
        seen = sum(share_key(s) in local.seen_shares for s in block.shares)
        seen += sum(nj.key() in local.seen_new_joins for nj, _ in block.newJoins)
        if Fraction(seen, total) < SEEN_FRACTION:
            reasons.append(BlockReject.UNKNOWN_CONTENT)
    uniq = tuple(dict.fromkeys(reasons))
    return BlockVerdict(not uniq, uniq)


# --- a single-chain engine ------------------------------------------------------------------

class ChainEngine:
    """Round bookkeeping for one chain: miners, try ranges and difficulty state."""

    def __init__(self, BI: float, initial_ad: float, initial_ed: float | None = None) -> None:
        self.BI = BI
        self.ad = float(initial_ad)
        self.ed = float(initial_ed if initial_ed is not None else initial_ad / 2)
        self.height = 0
        self.timestamps: list[float] = []
        self.miners: dict[bytes, MinerRecord] = {}
        self.ledger = BranchLedger()

    def register(self, miner: MinerRecord) -> None:
        self.register_many([miner])

    def register_many(self, miners: Iterable[MinerRecord]) -> None:
        for m in miners:
            self.miners[m.identityKey] = m
        assign_try_ranges(self.miners.values())

    def expel(self, keys: Iterable[bytes]) -> None:
        for k in keys:
            self.miners.pop(k, None)
        if self.miners:
            assign_try_ranges(self.miners.values())

    @property
    def registered_power(self) -> float:
        return float(sum(m.cpClaim for m in self.miners.values()))

    def participants(self) -> list[MinerRecord]:
        return canonical_order(self.miners.values())

    def submit(self, share: Share, key: bytes, block: Block | bytes, height: int | None = None) -> ShareVerdict:
        miner = self.miners.get(key)
        if miner is None:
            return ShareVerdict(False, ShareReject.BAD_SIGNATURE)
        return submit_share(share, miner, block, self.height if height is None else height)

    def close_round(self, timestamp: float, entrance_count: int) -> None:
        """Advance one height and retarget both difficulties."""
        self.timestamps.append(timestamp)
        if len(self.timestamps) >= 2:
            self.ad = update_acceptance_difficulty(self.ad, self.timestamps[-1], self.timestamps[-2], self.BI)
        self.ed = update_entrance_difficulty(self.ed, entrance_count, self.ad)
        self.height += 1
        for m in self.miners.values():
            m.forget_before(self.height - 1)
