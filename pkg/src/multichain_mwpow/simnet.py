"""Deterministic discrete-event simulator for a multichain MWPoW network.

The simulation runs in block intervals. Each interval opens with a barrier
(metrics, global header, merges, splits, churn, load) followed by one mining
round per live chain and a deadline where support, statement rate and
finality are evaluated. Message timing (latency plus size over bandwidth) is
sampled per message, vectorised with numpy, and shares arriving after a
deadline do not count.
"""

from __future__ import annotations

import bisect
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np

from . import chaindata as cd
from . import multichain as mc
from .chaindata import BlockHeader, BlockKind, DutyRange, GlobalBlockHeader, NewAssignJoin
from .multichain import ChainParams, ChainState, MergeCoordinator
from .mwpow import (
    COMMIT_SHARES,
    FINALITY_MARGIN,
    SHARE_FRACTION,
    SHARE_QUOTA,
    STATEMENT_MAJORITY,
    BranchLedger,
    ChainEngine,
    MinerRecord,
    assign_try_ranges,
    decisive,
    share_difficulty,
)
from .security import GroupProfile, Voter, VoteProfile, block_control_prob, support_margin_search

# RNG stream tags
_S_CLAIMS, _S_ADVERSARY, _S_MINING, _S_LOAD, _S_CHURN, _S_KEYS = range(6)

SHARE_BYTES = cd.structure_size("share") / 8
NAJ_BYTES = cd.structure_size("new_assign_join") // 8
TX_BYTES = cd.TX_SIZE_BYTES
BOX_ENTRY_BYTES = 40
# exhaustive margin search inside the simulation stays below this many voters
SIM_MARGIN_LIMIT = 12


# --- models ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyModel:
    low: int = 1
    high: int = 200
    # optional empirical histogram: (values_ms, weights)
    empirical: tuple[tuple[int, ...], tuple[float, ...]] | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.low <= self.high:
            raise ValueError("latency bounds must satisfy 0 <= low <= high")
        if self.empirical is not None:
            vals, w = self.empirical
            if len(vals) != len(w) or not vals:
                raise ValueError("empirical latency needs matching values and weights")
            if min(vals) < self.low or max(vals) > self.high:
                raise ValueError("empirical latency values outside bounds")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.empirical is not None:
            vals, w = self.empirical
            p = np.asarray(w, dtype=float)
            return rng.choice(np.asarray(vals, dtype=np.int64), size=size, p=p / p.sum())
        return rng.integers(self.low, self.high + 1, size=size, dtype=np.int64)


@dataclass(frozen=True)
class BandwidthModel:
    bytesPerSecond: float = 10_000_000.0

    def transfer_ms(self, size_bytes: float) -> float:
        return size_bytes * 1000.0 / self.bytesPerSecond


class MiningMode(str, Enum):
    FLUID = "fluid"
    STOCHASTIC = "stochastic"
    CONCRETE = "concrete"


class AdversaryMode(str, Enum):
    DORMANT = "dormantUntilQuorum"
    HALT = "haltShard"
    CORRUPT = "corruptFork"
    CHURN = "churnRejoin"


# adversary share of chain power at which an honest block can no longer clear the support gap
FORK_QUORUM = (1 - FINALITY_MARGIN) / 2
HALT_QUORUM = STATEMENT_MAJORITY


@dataclass(frozen=True)
class AdversaryPolicy:
    mode: AdversaryMode = AdversaryMode.DORMANT
    powerFraction: float = 0.0
    quorum: float | None = None
    churnProbability: float = 1 / 20
    churnEvery: int = 10
    allowMajority: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", AdversaryMode(self.mode))
        if not 0 <= self.powerFraction <= 1:
            raise ValueError("adversary power fraction must lie in [0, 1]")
        if self.powerFraction > 0.5 and not self.allowMajority:
            raise ValueError("adversary power above 50% requires allowMajority")
        if self.churnEvery < 1 or not 0 <= self.churnProbability <= 1:
            raise ValueError("bad churn schedule")

    @property
    def acting_quorum(self) -> float:
        if self.quorum is not None:
            return self.quorum
        return HALT_QUORUM if self.mode is AdversaryMode.HALT else FORK_QUORUM


POWER_PRESETS = ("uniformA", "skewedB", "balancedC")


@dataclass(frozen=True)
class ScenarioConfig:
    nodes: int = 400
    powerDistribution: str | tuple[int, ...] = "uniformA"
    K: int = 100
    Ti: int = 20
    Sg: int = 20
    Th: float = 1e-6
    BI: float = 10.0
    adversary: AdversaryPolicy = field(default_factory=AdversaryPolicy)
    loadRate: float = 2500.0
    # optional (start_interval, rate) steps overriding loadRate from that interval on
    loadSchedule: tuple[tuple[int, float], ...] = ()
    horizon: int = 100
    seedList: tuple[int, ...] = (0,)
    mining: MiningMode = MiningMode.STOCHASTIC
    latency: LatencyModel = field(default_factory=LatencyModel)
    bandwidth: BandwidthModel = field(default_factory=BandwidthModel)
    trace: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mining", MiningMode(self.mining))
        if isinstance(self.powerDistribution, list):
            object.__setattr__(self, "powerDistribution", tuple(self.powerDistribution))
        object.__setattr__(self, "seedList", tuple(int(s) for s in self.seedList))
        object.__setattr__(self, "loadSchedule", tuple((int(a), float(b)) for a, b in self.loadSchedule))
        self.validate()

    def validate(self) -> None:
        if self.nodes < 1:
            raise ValueError("need at least one node")
        if self.Ti <= 0 or self.Ti % 4:
            raise ValueError(f"Ti={self.Ti} must be a positive multiple of 4")
        if self.Sg < 1:
            raise ValueError("Sg must be at least 1")
        if not 0 < self.Th < 1:
            raise ValueError("Th must lie in (0, 1)")
        if self.K < 2 or self.BI <= 0 or self.horizon < 1:
            raise ValueError("K >= 2, BI > 0 and horizon >= 1 are required")
        if self.loadRate < 0 or any(r < 0 for _, r in self.loadSchedule):
            raise ValueError("load rate must be non-negative")
        if isinstance(self.powerDistribution, str):
            if self.powerDistribution not in POWER_PRESETS:
                raise ValueError(f"unknown power distribution {self.powerDistribution!r}")
        elif len(self.powerDistribution) != self.nodes or min(self.powerDistribution) < 1:
            raise ValueError("explicit power list must give one positive claim per node")
        if self.mining is MiningMode.CONCRETE and self.nodes > 64:
            raise ValueError("concrete mining is for small unit-test scenarios (<= 64 nodes)")

    @property
    def params(self) -> ChainParams:
        # NewAssignJoin PoW is not ground in simulation; its cost is abstracted away
        return ChainParams(K=self.K, Ti=self.Ti, Sg=self.Sg, Th=self.Th, BI=self.BI, qualification=2.0**-40)

    def load_at(self, interval: int) -> float:
        rate = self.loadRate
        for start, r in sorted(self.loadSchedule):
            if interval >= start:
                rate = r
        return rate


@dataclass(frozen=True)
class MetricsRecord:
    interval: int
    chainCount: int
    txProcessed: int
    confirmMean: float
    confirmP50: float
    confirmP95: float
    reassignmentCount: int
    haltEvents: int
    bwMeanDown: float = 0.0
    bwPeakDown: float = 0.0
    corruptedFinal: int = 0
    pending: int = 0

    CSV_COLUMNS = ("interval", "chains", "tx_processed", "confirm_mean_s", "confirm_p95_s", "reassignments", "halts")

    def csv_row(self) -> tuple:
        return (
            self.interval, self.chainCount, self.txProcessed, round(self.confirmMean, 6),
            round(self.confirmP95, 6), self.reassignmentCount, self.haltEvents,
        )


# --- power distributions ------------------------------------------------------------------------

def sample_claims(dist: str | Sequence[int], n: int, rng: np.random.Generator) -> list[int]:
    """Power claims for ``n`` nodes; the strongest are dropped to pending until the
    system-wide balance rule (any 2/3 of nodes hold at least half) holds."""
    if not isinstance(dist, str):
        claims = [int(c) for c in dist]
    elif dist == "uniformA":
        claims = rng.integers(30, 121, size=n).tolist()
    elif dist == "skewedB":
        claims = np.maximum(np.rint(rng.lognormal(np.log(50), 0.4, size=n)), 1).astype(int).tolist()
    elif dist == "balancedC":
        claims = np.clip(np.rint(rng.normal(70, 7, size=n)), 40, 100).astype(int).tolist()
    else:
        raise ValueError(f"unknown power distribution {dist!r}")
    return claims


def balanced_subset(claims: Sequence[int]) -> list[int]:
    """Indices of admitted nodes: strongest kept pending while the balance rule fails."""
    order = sorted(range(len(claims)), key=lambda i: (claims[i], i))
    while order and 2 * mc.threshold_chainpower([claims[i] for i in order]) < sum(claims[i] for i in order):
        order.pop()
    return sorted(order)


# --- event queue ----------------------------------------------------------------------------------

class EventKind(str, Enum):
    BARRIER = "barrier"
    MINE_TICK = "mineTick"
    BLOCK_DEADLINE = "blockDeadline"
    DELIVER = "deliver"
    CHURN = "churn"
    ADVERSARY = "adversaryAction"


@dataclass(order=True)
class SimEvent:
    time: int
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Events in (time, insertion sequence) order."""

    def __init__(self) -> None:
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.now = 0

    def push(self, time: int, kind: EventKind, payload: Any = None) -> SimEvent:
        if time < self.now:
            raise ValueError(f"event at {time} scheduled in the past (now {self.now})")
        ev = SimEvent(int(time), self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> SimEvent:
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        return ev

    def __len__(self) -> int:
        return len(self._heap)


# --- routing ------------------------------------------------------------------------------------

class Router:
    """Maps (source key, hash) to the live chain governing it."""

    def __init__(self, chains: Iterable[ChainState]) -> None:
        table: dict[int, list[tuple[int, int, int]]] = {}
        for c in chains:
            for key, ivs in c.dutyRange.segments.items():
                for lo, hi in ivs:
                    table.setdefault(key, []).append((lo, hi, c.id))
        self.table = {k: sorted(v) for k, v in table.items()}
        self.lows = {k: [lo for lo, _, _ in v] for k, v in self.table.items()}

    def route(self, key: int, h: int) -> int | None:
        rows = self.table.get(key)
        if rows is None:
            return None
        i = bisect.bisect_right(self.lows[key], h) - 1
        if i >= 0 and rows[i][0] <= h <= rows[i][1]:
            return rows[i][2]
        return None


# --- per-chain simulation state -----------------------------------------------------------------

@dataclass
class Tx:
    h: int
    born: int  # injection time, ms
    key: int  # chain whose block holds the spent input
    inp: int  # hash of the spent input


@dataclass
class SimChain:
    state: ChainState
    ledger: BranchLedger
    root: bytes
    tip: bytes
    forgedTip: bytes | None = None
    items: dict[bytes, list] = field(default_factory=dict)
    voters: dict[bytes, tuple[int, ...]] = field(default_factory=dict)
    voterList: dict[bytes, list[Voter]] = field(default_factory=dict)
    forged: dict[bytes, float] = field(default_factory=dict)
    pabs: dict[bytes, tuple[cd.Block, bytes, tuple[int, ...]]] = field(default_factory=dict)
    najPool: dict[bytes, NewAssignJoin] = field(default_factory=dict)
    appliedPab: bytes | None = None
    # verified (NewJoin, NAJ) pairs waiting for this chain's next Fub
    inbound: list = field(default_factory=list)
    fubJoins: list = field(default_factory=list)
    pendingRound: tuple | None = None
    finals: int = 0
    haltOnset: int | None = None
    halted: bool = False
    lastFinalHash: bytes = cd.ZERO_HASH

    @property
    def id(self) -> int:
        return self.state.id


@dataclass
class HaltEvent:
    chain: int
    onset: int
    detected: int
    merged: int | None = None


@dataclass
class RunResult:
    scenario: ScenarioConfig
    seed: int
    records: list[MetricsRecord]
    downBytes: np.ndarray
    upBytes: np.ndarray
    memberOf: np.ndarray
    latencyMin: int
    latencyMax: int
    latencyCount: int
    corruptedFinal: int
    forgedBlocks: int
    thresholdEvents: list[dict]
    halts: list[HaltEvent]
    dutyViolations: int
    injected: int
    accepted: int
    pending: int
    rejected: int
    doubleAccepted: int
    doubleSpends: int
    maxService: int
    newJoinsAdmitted: int
    assignmentRejects: int
    trace: list[tuple]
    chainSizes: list[list[int]]

    def summary(self) -> dict:
        recs = self.records
        processed = [r.txProcessed for r in recs]
        conf = [r.confirmMean for r in recs if r.txProcessed]
        return {
            "seed": self.seed,
            "intervals": len(recs),
            "mean_throughput": float(np.mean(processed)) if processed else 0.0,
            "total_processed": int(sum(processed)),
            "mean_confirm_s": float(np.mean(conf)) if conf else 0.0,
            "max_chains": max((r.chainCount for r in recs), default=0),
            "final_chains": recs[-1].chainCount if recs else 0,
            "reassignments": int(sum(r.reassignmentCount for r in recs)),
            "halts": int(sum(r.haltEvents for r in recs)),
            "corrupted_final": self.corruptedFinal,
            "forged_blocks": self.forgedBlocks,
            "duty_violations": self.dutyViolations,
            "double_spends": self.doubleSpends,
        }


class Simulation:
    def __init__(self, scenario: ScenarioConfig, seed: int) -> None:
        self.sc = scenario
        self.seed = int(seed)
        self.params = scenario.params
        self.policy = scenario.adversary
        self.BI_ms = int(round(scenario.BI * 1000))
        self.q = EventQueue()
        self.coord = MergeCoordinator()

        all_claims = sample_claims(scenario.powerDistribution, scenario.nodes, self._rng(_S_CLAIMS))
        admitted = balanced_subset(all_claims)
        self.n = scenario.nodes
        self.claims = np.array(all_claims, dtype=float)
        tag = self.seed.to_bytes(8, "little", signed=True)
        self.keys = [cd.H(b"node" + tag + i.to_bytes(4, "little")) for i in range(self.n)]
        self.index = {k: i for i, k in enumerate(self.keys)}
        self.adv = np.zeros(self.n, dtype=bool)
        if self.policy.powerFraction > 0:
            # drawn from its own stream so the honest trace does not depend on it
            order = self._rng(_S_ADVERSARY).permutation(admitted)
            goal = self.policy.powerFraction * self.claims[admitted].sum()
            acc = 0.0
            # turn random nodes adversarial without ever exceeding the requested fraction
            for i in order:
                if acc + self.claims[i] <= goal:
                    self.adv[i] = True
                    acc += self.claims[i]

        genesis = ChainState(1, ChainEngine(scenario.BI, 1.0), DutyRange.genesis())
        for j, i in enumerate(admitted):
            # stagger lifelengths as if nodes had joined over the previous Ti heights
            join = -4 * (j % (scenario.Ti // 4))
            m = MinerRecord(self.keys[i], float(all_claims[i]), joinHeight=join, adversary=bool(self.adv[i]))
            genesis.engine.miners[m.identityKey] = m
            genesis.najOf[m.identityKey] = self._naj(i, 0)
        assign_try_ranges(genesis.engine.miners.values())
        genesis.record_acceptance(scenario.Sg)
        self.chains: dict[int, SimChain] = {}
        self._install(genesis, cd.H(b"genesis" + tag))
        self.pendingNodes = sorted(set(range(self.n)) - set(admitted))

        H_ = scenario.horizon
        self.down = np.zeros((H_, self.n))
        self.up = np.zeros((H_, self.n))
        self.member = np.full((H_, self.n), -1, dtype=np.int64)
        self.inbox: list[tuple[int, int, Tx]] = []
        self.unspent: list[tuple[int, int]] = []
        self.spent: set[int] = set()
        self.acceptedTx: set[int] = set()
        self.injected = 0
        self.doubleAccepted = 0
        self.doubleSpends = 0
        self.rejected = 0
        self.corrupted = 0
        self.forgedCount = 0
        self.thresholdEvents: list[dict] = []
        self.halts: list[HaltEvent] = []
        self.dutyViolations = 0
        self.lat_min, self.lat_max, self.lat_n = 10**9, -1, 0
        self.trace: list[tuple] = []
        self.records: list[MetricsRecord] = []
        self.chainSizes: list[list[int]] = []
        self.maxService = 0
        self.newJoins = 0
        self.assignRejects = 0
        self.usedNewJoins: set[bytes] = set()
        self.churned: deque = deque()
        self._refresh()
        self._reset_interval_stats()

    # --- helpers --------------------------------------------------------------------------

    def _rng(self, stream: int, *extra: int) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFF, stream, *[int(e) & 0xFFFFFFFF for e in extra]])

    def _naj(self, i: int, nonce: int) -> NewAssignJoin:
        # qualification PoW is abstracted in simulation (see ScenarioConfig.params)
        return NewAssignJoin(cd.ZERO_HASH, int(self.claims[i]), cd.H(b"w" + self.keys[i]), self.keys[i], nonce)

    def _install(self, state: ChainState, root: bytes) -> SimChain:
        if state.engine.miners:
            state.engine.ad = state.engine.registered_power
            state.engine.ed = state.engine.ad / 2
        ledger = BranchLedger()
        ledger.add_block(root, None, state.height - 1, announced=True)
        c = SimChain(state, ledger, root, root, lastFinalHash=root)
        self.chains[state.id] = c
        return c

    def _refresh(self) -> None:
        """Recompute system-wide boundaries, adversary profile, global header and router."""
        states = [c.state for c in self.chains.values()]
        self.bl = mc.compute_group_boundaries(states, self.sc.Sg)
        total = sum(s.engine.registered_power for s in states)
        nodes = sum(len(s.engine.miners) for s in states)
        self.profile = mc.system_profile(self.bl, total, nodes)
        self.gh = GlobalBlockHeader(tuple((cid, c.lastFinalHash) for cid, c in sorted(self.chains.items())))
        self.mgbh = self.gh.merkleRoot
        self.ranked = tuple(self.gh.ranked_ids())
        self.router = Router(states)

    def _reset_interval_stats(self) -> None:
        self.i_processed = 0
        self.i_latencies: list[float] = []
        self.i_reassign = 0
        self.i_halts = 0

    def _note_latency(self, lat: np.ndarray) -> None:
        if lat.size:
            self.lat_min = min(self.lat_min, int(lat.min()))
            self.lat_max = max(self.lat_max, int(lat.max()))
            self.lat_n += int(lat.size)

    def _adv_share(self, c: SimChain) -> float:
        ms = c.state.engine.miners.values()
        total = sum(m.cpClaim for m in ms)
        return sum(m.cpClaim for m in ms if m.adversary) / total if total else 0.0

    def _action(self, c: SimChain) -> str:
        """Adversaries act only with enough companions in the chain; otherwise they mine honestly."""
        pol = self.policy
        if pol.powerFraction <= 0 or pol.mode in (AdversaryMode.DORMANT, AdversaryMode.CHURN):
            return "honest"
        if self._adv_share(c) < pol.acting_quorum:
            return "honest"
        return "fork" if pol.mode is AdversaryMode.CORRUPT else "withhold"

    # --- main loop ------------------------------------------------------------------------

    def run(self) -> RunResult:
        self.q.push(0, EventKind.BARRIER, 0)
        while len(self.q):
            ev = self.q.pop()
            if ev.kind is EventKind.BARRIER:
                k = ev.payload
                if k > 0:
                    self._record(k - 1)
                if k >= self.sc.horizon:
                    break
                self._barrier(k)
                for cid in sorted(self.chains):
                    self.q.push(ev.time, EventKind.MINE_TICK, (cid, k))
                # deadlines are queued before the next barrier so they run first at equal times
                for cid in sorted(self.chains):
                    self.q.push(ev.time + self.BI_ms, EventKind.BLOCK_DEADLINE, (cid, k))
                self.q.push(ev.time + self.BI_ms, EventKind.BARRIER, k + 1)
            elif ev.kind is EventKind.MINE_TICK:
                cid, k = ev.payload
                if cid in self.chains:
                    self._mine(self.chains[cid], k, ev.time)
            elif ev.kind is EventKind.BLOCK_DEADLINE:
                cid, k = ev.payload
                if cid in self.chains:
                    self._deadline(self.chains[cid], k, ev.time)
        in_flight = sum(1 for c in self.chains.values() for v in c.items.values() for x in v if isinstance(x, Tx))
        pending = len(self.inbox) + sum(len(c.state.pendingTx) for c in self.chains.values()) + in_flight
        return RunResult(
            self.sc, self.seed, self.records, self.down, self.up, self.member,
            self.lat_min if self.lat_n else 0, self.lat_max if self.lat_n else 0, self.lat_n,
            self.corrupted, self.forgedCount, self.thresholdEvents, self.halts, self.dutyViolations,
            self.injected, len(self.acceptedTx), pending, self.rejected, self.doubleAccepted,
            self.doubleSpends, self.maxService, self.newJoins, self.assignRejects, self.trace, self.chainSizes,
        )

    def _record(self, k: int) -> None:
        # nodes outside every chain still follow the global headers
        idle = self.member[k] < 0
        self.down[k, idle] += cd.structure_size("header", Sg=self.sc.Sg) / 8 * len(self.chains)
        lats = self.i_latencies
        down_live = self.down[k][self.member[k] >= 0]
        self.records.append(MetricsRecord(
            interval=k,
            chainCount=len(self.chains),
            txProcessed=self.i_processed,
            confirmMean=float(np.mean(lats)) if lats else 0.0,
            confirmP50=float(np.percentile(lats, 50)) if lats else 0.0,
            confirmP95=float(np.percentile(lats, 95)) if lats else 0.0,
            reassignmentCount=self.i_reassign,
            haltEvents=self.i_halts,
            bwMeanDown=float(down_live.mean()) if down_live.size else 0.0,
            bwPeakDown=float(down_live.max()) if down_live.size else 0.0,
            corruptedFinal=self.corrupted,
            pending=sum(c.state.trans_onhold for c in self.chains.values()),
        ))
        self.chainSizes.append([len(self.chains[c].state.engine.miners) for c in sorted(self.chains)])
        self._reset_interval_stats()

    # --- barrier: topology changes and load --------------------------------------------------

    def _barrier(self, k: int) -> None:
        self._refresh()
        self._merges(k)
        self._refresh()
        self._splits()
        self._refresh()
        if self.policy.mode is AdversaryMode.CHURN and self.policy.powerFraction > 0:
            self._churn(k)
        if cd.check_duty_conservation(c.state.dutyRange for c in self.chains.values()):
            self.dutyViolations += 1
        self._deliver(k * self.BI_ms)
        self._inject(k)
        for cid, c in self.chains.items():
            for m in c.state.engine.miners.values():
                self.member[k, self.index[m.identityKey]] = cid

    def _requeue(self, c: SimChain) -> None:
        """Return the transactions of unfinalised blocks to the front of the queue."""
        items = []
        for h in self._path_from_root(c, c.tip):
            items.extend(x for x in c.items.get(h, []) if isinstance(x, Tx))
        c.items.clear()
        c.state.pendingTx.extendleft(reversed(items))

    def _path_from_root(self, c: SimChain, tip: bytes) -> list[bytes]:
        out = []
        h = tip
        while h is not None and h != c.root:
            out.append(h)
            h = c.ledger.nodes[h].parent
        return out[::-1]

    def _withholding(self, c: SimChain) -> bool:
        return self._action(c) == "withhold"

    def _merges(self, k: int) -> None:
        live = sorted(self.chains)
        for cid in live:
            if mc.merge_trigger(self.chains[cid].state, self.bl, self.params, self.profile) is not None:
                self.coord.request(cid, live)
        self.coord.tick(live)
        for group in self.coord.groups():
            group = sorted(g for g in group if g in self.chains)
            if len(group) < 2:
                continue
            members = [self.chains[g] for g in group]
            # miners withholding their shares do not approve the merged branch either
            approvers = [m for c in members for m in c.state.participants if not (m.adversary and self._withholding(c))]
            if not mc.merge_approved(approvers, self.bl, self.profile, self.params.Th):
                continue
            for c in members:
                self._requeue(c)
                for naj in c.najPool.values():
                    c.state.pendingNAJ.append(naj)
            merged = mc.merge_chains([c.state for c in members], Sg=self.sc.Sg)
            for g in group:
                del self.chains[g]
                self.coord.drop(g)
            for ev in self.halts:
                if ev.chain in group and ev.merged is None:
                    ev.merged = k
            new = self._install(merged, cd.H(b"merge" + b"".join(cd._u32(g) for g in group) + cd._u32(merged.height)))
            new.inbound = [x for c in members for x in c.inbound]

    def _splits(self) -> None:
        busy = set(self.coord.targets) | set(self.coord.targets.values())
        for cid in sorted(self.chains):
            c = self.chains[cid]
            # the split test reads the latest finally accepted block, so a fresh chain waits for one
            if cid in busy or c.finals == 0 or 2 * cid + 1 >= 2**32:
                continue
            others = [o.state for o in self.chains.values() if o is not c]
            if not mc.split_decision(c.state, self.bl, self.params, self.profile, others=others):
                continue
            self._requeue(c)
            for naj in c.najPool.values():
                c.state.pendingNAJ.append(naj)
            kids = mc.split_chain(c.state, self.bl, self.params, self.profile, item_key=_route_key, others=others)
            del self.chains[cid]
            for i, child in enumerate(kids):
                new = self._install(child, cd.H(b"split" + cd._u32(child.id) + cd._u32(child.height)))
                new.inbound = c.inbound[i::2]
            self._refresh()

    def _churn(self, k: int) -> None:
        pol = self.policy
        # nodes that left last time rejoin through a NewAssignJoin sent to the governing chain
        while self.churned:
            i = self.churned.popleft()
            naj = self._naj(i, k)
            dest = self.router.route(1, cd.hash_int(naj.hash()))
            if dest is not None:
                self.chains[dest].state.pendingNAJ.append(naj)
        if k == 0 or k % pol.churnEvery:
            return
        rng = self._rng(_S_CHURN, k)
        for cid in sorted(self.chains):
            st = self.chains[cid].state
            leaving = [m.identityKey for m in st.participants if m.adversary and rng.random() < pol.churnProbability]
            leaving = leaving[: max(0, len(st.engine.miners) - 1)]
            if leaving:
                st.engine.expel(leaving)
                for key in leaving:
                    st.najOf.pop(key, None)
                    self.churned.append(self.index[key])

    def _inject(self, k: int) -> None:
        rate = self.sc.load_at(k)
        rng = self._rng(_S_LOAD, k)
        count = int(rate) if float(rate).is_integer() else int(rng.poisson(rate))
        if count <= 0:
            return
        self.injected += count
        t0 = k * self.BI_ms
        born = (t0 + rng.integers(0, self.BI_ms, size=count)).tolist()
        lat = self.sc.latency.sample(rng, count)
        self._note_latency(lat)
        arrive = (lat + born + int(math.ceil(self.sc.bandwidth.transfer_ms(TX_BYTES)))).tolist()
        raw = rng.bytes(64 * count)
        picks = rng.random(count).tolist()
        for j in range(count):
            h = int.from_bytes(raw[64 * j:64 * j + 32], "little")
            if self.unspent:
                # spend a random unspent output; the chain that accepted it governs the spend
                idx = int(picks[j] * len(self.unspent))
                self.unspent[idx], self.unspent[-1] = self.unspent[-1], self.unspent[idx]
                inp, key = self.unspent.pop()
            else:
                inp, key = int.from_bytes(raw[64 * j + 32:64 * j + 64], "little"), 1
            heapq.heappush(self.inbox, (arrive[j], h, Tx(h, born[j], key, inp)))

    def _deliver(self, now: int) -> None:
        while self.inbox and self.inbox[0][0] <= now:
            _, _, tx = heapq.heappop(self.inbox)
            cid = self.router.route(tx.key, tx.inp)
            if cid is None:
                self.rejected += 1
                continue
            self.chains[cid].state.pendingTx.append(tx)

    # --- mining round -------------------------------------------------------------------------

    def _mine(self, c: SimChain, k: int, t0: int) -> None:
        st = c.state
        sc = self.sc
        parts = st.participants
        n = len(parts)
        if n == 0:
            return
        height = st.height
        kind = st.kind(height)
        Rp = st.engine.registered_power
        rng = self._rng(_S_MINING, c.id, k)
        idx = np.array([self.index[m.identityKey] for m in parts], dtype=np.int64)
        claims = np.array([m.cpClaim for m in parts])
        advm = np.array([m.adversary for m in parts], dtype=bool)
        action = self._action(c)

        # block content: new joins (Fub only) count against the K item limit
        joins = []
        if kind is BlockKind.FUB:
            joins, c.inbound = c.inbound[: sc.K], c.inbound[sc.K:]
        take = []
        while st.pendingTx and len(take) + len(joins) < sc.K:
            take.append(st.pendingTx.popleft())
        c.fubJoins = joins

        box = None
        if kind is BlockKind.PAB:
            box = mc.form_pab(st, self.mgbh, bl=self.bl, ranked_ids=self.ranked, params=self.params)
            chosen = {h for h, _, _ in box.entries()}
            if chosen:
                for naj in st.pendingNAJ:
                    if naj.hash() in chosen:
                        c.najPool[naj.hash()] = naj
                st.pendingNAJ = deque(x for x in st.pendingNAJ if x.hash() not in chosen)
        rcp = sorted(claims.tolist())
        header = BlockHeader(
            prevHash=c.tip, mgbh=self.mgbh,
            txMerkleRoot=box.root() if box is not None else cd.H(b"".join(cd.int_hash(t.h) for t in take)),
            chainpower=int(round(Rp)), transOnhold=len(take) + len(joins) + st.trans_onhold,
            thresholdChainpower=min(int(round(mc.threshold_chainpower(rcp))), int(round(Rp))),
            numParticipants=n, timestamp=t0 // 1000,
            entranceDifficulty=int(round(st.engine.ed)), acceptanceDifficulty=int(round(st.engine.ad)),
            blCandidate=mc.bl_candidate(rcp, sc.Sg),
        )
        block = cd.Block(header, kind, height=height, nonce=k, assignmentBox=box)
        bh = block.hash()
        c.items[bh] = take
        if box is not None:
            c.pabs[bh] = (block, self.mgbh, self.ranked)

        hdr_bytes = cd.structure_size("header", Sg=sc.Sg) / 8
        block_bytes = hdr_bytes + TX_BYTES * len(take)
        block_bytes += len(joins) * (cd.structure_size("new_join", K=sc.K) / 8 + NAJ_BYTES)
        if box is not None:
            block_bytes += BOX_ENTRY_BYTES * (len(box.entries()) + sum(len(v) for _, v in box.reassignmentSection))

        forging = advm & (action == "fork")
        silent = advm & (action == "withhold")
        fb = None
        if action == "fork":
            # the forged branch forks off the last common block and keeps extending itself
            fparent = c.forgedTip if c.forgedTip is not None else c.tip
            fb = cd.H(b"forged" + bh)
            c.items[fb] = [("double-spend", k)]
            self.forgedCount += 1

        # share generation and delivery
        deadline = t0 + self.BI_ms
        bw = sc.bandwidth
        lat_block = sc.latency.sample(rng, n)
        arrive = t0 + lat_block + bw.transfer_ms(block_bytes)
        if sc.mining is MiningMode.FLUID:
            gaps = np.full((n, SHARE_QUOTA), self.BI_ms * SHARE_FRACTION)
            u = np.full((n, SHARE_QUOTA), 0.5)
        else:
            gaps = rng.exponential(self.BI_ms * SHARE_FRACTION, size=(n, SHARE_QUOTA))
            u = rng.random((n, SHARE_QUOTA))
        gen = arrive[:, None] + np.cumsum(gaps, axis=1)
        lat_sh = sc.latency.sample(rng, (n, SHARE_QUOTA))
        self._note_latency(lat_block)
        self._note_latency(lat_sh)
        deliver = gen + lat_sh + bw.transfer_ms(SHARE_BYTES)
        sent = (gen <= deadline) & ~silent[:, None]
        ok = sent & (deliver <= deadline)
        if sc.mining is MiningMode.CONCRETE:
            diffs = _concrete_difficulties(parts, bh, fb, forging)
        else:
            # a share meeting difficulty d has actual difficulty d / U
            diffs = SHARE_FRACTION * claims[:, None] / (1.0 - u)
        committed = ok.sum(axis=1) >= COMMIT_SHARES
        sd = np.where(committed, np.minimum((diffs * ok).sum(axis=1), claims), 0.0)

        if sc.trace and len(self.trace) < 5000:
            for i in range(min(n, 4)):
                self.trace.append(("block", float(t0), float(arrive[i]), int(lat_block[i]), block_bytes))
                for j in range(SHARE_QUOTA):
                    if sent[i, j]:
                        self.trace.append(("share", float(gen[i, j]), float(deliver[i, j]), int(lat_sh[i, j]), SHARE_BYTES))

        # bytes: every member uploads its shares and downloads the block, its peers' shares
        # and the headers announced by the other chains
        up = sent.sum(axis=1) * SHARE_BYTES
        gossip = hdr_bytes * (len(self.chains) - 1)
        self.up[k, idx] += up
        self.down[k, idx] += up.sum() - up + block_bytes + gossip

        honest = committed & ~forging
        strv = float(claims[committed].sum()) / Rp if Rp else 0.0
        led = c.ledger
        led.add_block(bh, c.tip, height, announced=True, sd=float(sd[honest].sum()))
        self._set_voters(c, bh, claims[honest])
        c.tip = bh
        if fb is not None:
            fmask = committed & forging
            led.add_block(fb, fparent, height, announced=True, sd=float(sd[fmask].sum()))
            self._set_voters(c, fb, claims[fmask])
            c.forged[fb] = float(sd[fmask].sum())
            c.forgedTip = fb
        c.pendingRound = (strv, Rp)

    def _set_voters(self, c: SimChain, h: bytes, claims: np.ndarray) -> None:
        cl = claims.tolist()
        c.voters[h] = mc.group_counts(cl, self.bl)
        c.voterList[h] = [Voter(mc.group_of(x, self.bl), x) for x in cl]

    # --- deadline: support, finality, cadence effects ------------------------------------------

    def _deadline(self, c: SimChain, k: int, now: int) -> None:
        st = c.state
        if c.pendingRound is None:
            return
        strv, Rp = c.pendingRound
        c.pendingRound = None
        kind = st.kind(st.height)
        led = c.ledger
        oracle = _Oracle(c, self.profile, self.params.Th)

        path = led.heaviest_path()
        finalized: list[bytes] = []
        if strv > STATEMENT_MAJORITY:
            # a decisive block finalises itself and every ancestor on the heaviest path
            for i in range(len(path) - 1, 0, -1):
                if decisive(led, path[i], Rp, oracle):
                    finalized = path[1:i + 1]
                    break
        tip_decisive = bool(finalized) and finalized[-1] == path[-1]
        if finalized:
            self._finalize(c, finalized, k, now)
        mc.note_interval(st, self.params, bool(finalized), sub_threshold=not tip_decisive)
        self._track_halt(c, k)
        if kind is BlockKind.FUB:
            self._fuel_up(c, k)
        st.engine.close_round(now / 1000.0, 1)
        for m in st.engine.miners.values():
            self.maxService = max(self.maxService, st.height - max(m.joinHeight, st.startHeight))

    def _finalize(self, c: SimChain, blocks: list[bytes], k: int, now: int) -> None:
        st = c.state
        for h in blocks:
            if h in c.forged:
                self.corrupted += 1
                self.doubleSpends += 1
                # a forged block got through every finality test: a security-threshold event
                self.thresholdEvents.append({
                    "interval": k, "chain": c.id, "control_prob": _control(c, h, self.profile),
                    "voters": sum(c.voters[h]), "support": c.forged[h], "chain_size": len(st.engine.miners),
                    "adversary_share": self._adv_share(c),
                })
            for x in c.items.pop(h, []):
                if isinstance(x, Tx):
                    self._accept_tx(x, c.id, now)
            if h in c.pabs:
                st.latestFinalPabHash = h
        last = blocks[-1]
        # re-root the ledger at the last final block, keeping its descendants
        new = BranchLedger()
        new.add_block(last, None, c.ledger.nodes[last].height, announced=True)
        stack = [last]
        while stack:
            x = stack.pop()
            for ch in c.ledger.nodes[x].children:
                node = c.ledger.nodes[ch]
                new.add_block(ch, x, node.height, announced=node.announced, sd=node.sd)
                stack.append(ch)
        # content of abandoned blocks goes back to the queue
        for h in [h for h in c.items if h not in new.nodes]:
            st.pendingTx.extendleft(reversed([x for x in c.items.pop(h) if isinstance(x, Tx)]))
        c.ledger = new
        c.root = last
        if c.tip not in new.nodes:
            c.tip = last
        if c.forgedTip is not None and (c.forgedTip not in new.nodes or c.forgedTip == last):
            c.forgedTip = None
        for d in (c.voters, c.voterList, c.forged):
            for h in [h for h in d if h not in new.nodes or h == last]:
                del d[h]
        c.lastFinalHash = last
        c.finals += len(blocks)
        st.record_acceptance(self.sc.Sg)

    def _accept_tx(self, tx: Tx, cid: int, now: int) -> None:
        if tx.h in self.acceptedTx:
            self.doubleAccepted += 1
            return
        if tx.inp in self.spent:
            self.doubleSpends += 1
        self.spent.add(tx.inp)
        self.acceptedTx.add(tx.h)
        self.unspent.append((tx.h, cid))
        self.i_processed += 1
        self.i_latencies.append((now - tx.born) / 1000.0)

    def _track_halt(self, c: SimChain, k: int) -> None:
        streak = c.state.unacceptedStreak
        if streak == 0:
            c.haltOnset = None
            c.halted = False
        elif streak == 1:
            c.haltOnset = k
        if streak >= mc.HALT_STREAK and not c.halted:
            c.halted = True
            self.i_halts += 1
            self.halts.append(HaltEvent(c.id, c.haltOnset if c.haltOnset is not None else k, k))

    def _fuel_up(self, c: SimChain, k: int) -> None:
        """Carry out the latest final Pab's assignment and admit the New Joins listed in this Fub."""
        st = c.state
        pab = st.latestFinalPabHash
        if pab is not None and pab in c.pabs and c.appliedPab != pab:
            c.appliedPab = pab
            block, mgbh, ranked = c.pabs[pab]
            box = block.assignmentBox
            by_hash = {n.hash(): n for n in st.najOf.values()}
            moved = []
            for dest, hashes in box.reassignmentSection:
                for h in hashes:
                    naj = by_hash.get(h)
                    if naj is None or naj.identityKey not in st.engine.miners:
                        continue
                    target = self._resolve(dest, h)
                    if target is not None and target != c.id:
                        moved.append((naj, target))
            if moved:
                st.engine.expel([naj.identityKey for naj, _ in moved])
            arrivals: dict[int, list[MinerRecord]] = {}
            for naj, target in moved:
                dst = self.chains[target].state
                i = self.index[naj.identityKey]
                arrivals.setdefault(target, []).append(
                    MinerRecord(naj.identityKey, float(self.claims[i]), joinHeight=dst.height, adversary=bool(self.adv[i]))
                )
                dst.najOf[naj.identityKey] = naj
                st.najOf.pop(naj.identityKey, None)
                self.i_reassign += 1
            for target, ms in arrivals.items():
                self.chains[target].state.engine.register_many(ms)
            # each new participant presents a New Join to the chain its subsection names
            for naj_hash, ll, _ in box.entries():
                naj = c.najPool.pop(naj_hash, None)
                if naj is None:
                    continue
                dest = mc.subsection_destination(pab, mgbh, ll, ranked)
                nj = mc.make_new_join(box, naj, pab, c.id)
                verdict = mc.verify_assignment(nj, naj, block, mgbh, ranked, dest, st.latestFinalPabHash, self.usedNewJoins)
                target = self._resolve(dest, naj_hash)
                if not verdict or target is None:
                    self.assignRejects += 1
                    continue
                self.chains[target].inbound.append((nj, naj))
            for old in [h for h in c.pabs if h != pab]:
                del c.pabs[old]
        joins = [(nj, naj) for nj, naj in c.fubJoins if naj.identityKey not in st.engine.miners]
        c.fubJoins = []
        if joins:
            res = mc.form_fub_and_adjust(st, joins, self.bl, height=st.height)
            for m in res.added:
                m.adversary = bool(self.adv[self.index[m.identityKey]])
            self.newJoins += len(res.added)
            self.i_reassign += len(res.added)

    def _resolve(self, cid: int, h: bytes) -> int | None:
        """Live chain standing in for ``cid``: itself, an offspring by duty range, or its merge successor."""
        if cid in self.chains:
            return cid
        hv = cd.hash_int(h)
        heirs = [o for o in sorted(self.chains) if cid in self.chains[o].state.historyIds]
        for o in heirs:
            if self.chains[o].state.dutyRange.governs(cid, hv):
                return o
        return heirs[0] if heirs else None


def _route_key(item) -> bytes:
    if isinstance(item, Tx):
        return item.key, item.inp
    return 1, item.hash()


def _concrete_difficulties(parts, bh: bytes, fb: bytes | None, forging: np.ndarray) -> np.ndarray:
    """Real share grinding at toy difficulty (8 expected hash attempts per share), in claim units."""
    out = np.zeros((len(parts), SHARE_QUOTA))
    toy = 8 * 2.0**-32
    for i, m in enumerate(parts):
        target = fb if (forging[i] and fb is not None) else bh
        nonce = m.tryRange[0]
        for j in range(SHARE_QUOTA):
            while share_difficulty(target, nonce) < toy:
                nonce += 1
            out[i, j] = share_difficulty(target, nonce) / toy * SHARE_FRACTION * m.cpClaim
            nonce += 1
    return out


def _control(c: SimChain, h: bytes, profile: GroupProfile) -> float:
    counts = tuple(min(x, profile.perGroupCount) for x in c.voters.get(h, ()))
    if not any(counts):
        return 1.0
    return block_control_prob(profile, VoteProfile(counts))


class _Oracle:
    """Security answers for one chain's ledger at one deadline."""

    def __init__(self, c: SimChain, profile: GroupProfile, th: float) -> None:
        self.c = c
        self.profile = profile
        self.threshold = th
        self._cache: dict[bytes, float] = {}

    def control_prob(self, h: bytes) -> float:
        if h not in self._cache:
            self._cache[h] = _control(self.c, h, self.profile)
        return self._cache[h]

    def margin_prob(self, winner: bytes, rival: bytes, margin: float) -> float:
        voters = _fold_overfull(self.c.voterList.get(winner, []), self.profile.perGroupCount)
        return support_margin_search(self.profile, voters, margin, limit=SIM_MARGIN_LIMIT).prob


def _fold_overfull(voters: Sequence[Voter], pop: int) -> list[Voter]:
    """Claims tied at a boundary can put more than n/Sg voters in one group. The surplus is
    folded into one voter so every subset keeps its strength while the group's count stays at
    the population, matching the clipping in :func:`_control`."""
    by_group: dict[int, list[float]] = {}
    for v in voters:
        by_group.setdefault(v.group, []).append(v.strength)
    out = []
    for g in sorted(by_group):
        xs = sorted(by_group[g], reverse=True)
        if pop >= 1 and len(xs) > pop:
            xs = xs[: pop - 1] + [sum(xs[pop - 1:])]
        out.extend(Voter(g, x) for x in xs)
    return out


# --- public entry points ------------------------------------------------------------------------

def run(scenario: ScenarioConfig, seed: int) -> RunResult:
    """Simulate ``scenario`` under ``seed``; identical inputs give identical results."""
    return Simulation(scenario, seed).run()


def inject_load(rate: float, nodes: int, interval: int, seed: int = 0, BI_ms: int = 10_000) -> list[tuple[int, int]]:
    """Standalone load generator: (injection time ms, node index) for one interval."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    rng = np.random.default_rng([seed, _S_LOAD, interval])
    count = int(rate)
    times = interval * BI_ms + rng.integers(0, BI_ms, size=count)
    who = rng.integers(0, nodes, size=count)
    return sorted(zip(times.tolist(), who.tolist()))


def bandwidth_audit(result: RunResult, node: int | None = None, interval: int | None = None) -> dict:
    """Byte ledger: a single (node, interval) cell, or peaks over the run."""
    if node is not None and interval is not None:
        return {"down": float(result.downBytes[interval, node]), "up": float(result.upBytes[interval, node])}
    live = result.memberOf >= 0
    down = np.where(live, result.downBytes, 0.0)
    up = np.where(live, result.upBytes, 0.0)
    return {"peak_down": float(down.max()), "peak_up": float(up.max()), "mean_down": float(down[live].mean()) if live.any() else 0.0}


def download_formula(npc: int, K: int) -> float:
    """Peak per-member download predicted for a chain of ``npc`` participants."""
    sizes = (
        cd.structure_size("new_join", K=K) / 8,
        4 * cd.structure_size("share") / 8,
        cd.structure_size("new_assign_join") / 8,
    )
    return npc * max(sizes) + TX_BYTES * K
