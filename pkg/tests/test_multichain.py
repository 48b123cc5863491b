from __future__ import annotations

import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multichain_mwpow import chaindata as cd
from multichain_mwpow import multichain as mc
from multichain_mwpow import mwpow as mw
from multichain_mwpow.chaindata import Block, BlockHeader, BlockKind, DutyRange, NewAssignJoin
from multichain_mwpow.multichain import (
    AssignmentReject,
    ChainParams,
    ChainState,
    DisputeCandidate,
    DisputeOutcome,
    MergeReason,
    TransferStatus,
)
from multichain_mwpow.mwpow import ChainEngine, MinerRecord
from multichain_mwpow.security import GroupProfile

TOY = 2.0**-30


def miner(name: str, claim: float, join: int = 0) -> MinerRecord:
    return MinerRecord(cd.H(name.encode()), float(claim), joinHeight=join)


def chain(cid: int, claims, duty: DutyRange | None = None, height: int = 0, Sg: int | None = None) -> ChainState:
    eng = ChainEngine(10.0, 100.0)
    eng.height = height
    for i, c in enumerate(claims):
        eng.register(miner(f"C{cid}-m{i}", c))
    st_ = ChainState(cid, eng, duty or DutyRange.genesis(cid), startHeight=height)
    if Sg is not None:
        st_.record_acceptance(Sg)
    return st_


def naj(i: int, ind: int, prev: bytes = cd.ZERO_HASH) -> NewAssignJoin:
    return NewAssignJoin(prev, ind, cd.H(b"w%d" % i), cd.H(b"id%d" % i), i)


def pab_block(box, mgbh: bytes, salt: bytes = b"") -> Block:
    header = BlockHeader(
        prevHash=cd.H(b"prev" + salt), mgbh=mgbh, txMerkleRoot=box.root(), chainpower=10,
        transOnhold=0, thresholdChainpower=6, numParticipants=4, timestamp=1,
        entranceDifficulty=1, acceptanceDifficulty=2, blCandidate=(1, 2),
    )
    return Block(header, BlockKind.PAB, height=1, assignmentBox=box)


# --- group boundaries ---------------------------------------------------------------------

def test_group_boundaries_single_chain():
    c = chain(1, range(1, 9), Sg=4)
    assert mc.compute_group_boundaries([c], 4) == (1, 3, 5, 7)


def test_group_boundaries_take_minimum_over_chains():
    a = chain(2, [2, 4, 6, 8], Sg=2)
    b = chain(3, [2, 4, 6, 8], Sg=2)
    assert mc.compute_group_boundaries([a, b], 2) == a.acceptedBl
    weak = chain(3, [1, 3, 5, 7], Sg=2)
    assert mc.compute_group_boundaries([a, weak], 2) == weak.acceptedBl


def test_group_boundaries_need_accepted_block():
    with pytest.raises(ValueError):
        mc.compute_group_boundaries([chain(1, [1, 2])], 2)


def test_group_boundaries_from_system_state():
    c = chain(1, range(1, 9), Sg=4)
    state = mc.SystemState({1: c}, cd.GlobalBlockHeader(((1, cd.ZERO_HASH),)), ChainParams(Sg=4))
    state.check_header()
    assert mc.compute_group_boundaries(state) == (1, 3, 5, 7)


# --- restrictions -------------------------------------------------------------------------

def test_threshold_chainpower_examples():
    assert mc.threshold_chainpower([1, 1, 1, 97]) == 3
    assert mc.threshold_chainpower([1, 1, 1, 1]) == 3


@settings(max_examples=60)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=8))
def test_threshold_chainpower_is_weakest_subset(claims):
    # brute force: the smallest sum over all subsets of the same size
    size = math.floor(2 * (len(claims) - 1) / 3) + 1
    best = min(sum(c) for c in itertools.combinations(claims, size))
    assert mc.threshold_chainpower(claims) == best


def test_restriction_power_imbalance():
    v = mc.check_chain_restrictions([1, 1, 1, 97], bl=(1,))
    assert not v and v.reason is MergeReason.POWER_IMBALANCE


def test_restriction_balanced_ok():
    assert mc.check_chain_restrictions([1, 1, 1, 1], bl=(1,))


def test_restriction_missing_group():
    v = mc.check_chain_restrictions([1, 1, 2, 2], bl=(1, 2, 5))
    assert v.reason is MergeReason.MISSING_GROUP


def test_restriction_insecure_when_all_voters_too_few():
    bl = (1.0, 2.0)
    # AP = 20 over tt = 3 -> 6 adversaries of 10 per group: C(6,2)/C(10,2) * 6/10 = 0.2
    profile = GroupProfile(2, bl, 20.0, 40.0, 10)
    v = mc.check_chain_restrictions([1, 1, 2], bl, profile, Th=1e-6)
    assert v.reason is MergeReason.INSECURE and v.prob == pytest.approx(0.2)
    many = [1] * 10 + [2] * 10
    assert mc.check_chain_restrictions(many, bl, profile, Th=1e-6)


# --- split ------------------------------------------------------------------------------------

def test_split_decision_thresholds():
    params = ChainParams(K=10, Ti=4, Sg=1)
    c = chain(1, [1, 1, 1, 1])
    c.pendingTx.extend(cd.H(b"t%d" % i) for i in range(2 * params.K + 1))
    assert mc.split_decision(c, (1,), params)
    c.pendingTx.clear()
    c.pendingTx.extend(cd.H(b"t%d" % i) for i in range(params.K))
    assert not mc.split_decision(c, (1,), params)


def test_split_participants_by_rank_parity():
    even, odd = mc.split_participants(chain(1, [4, 2, 3, 1]).participants)
    assert [m.cpClaim for m in even] == [1, 3]
    assert [m.cpClaim for m in odd] == [2, 4]
    c = chain(1, [2, 2, 2, 2])
    a, b = mc.split_chain(c, (1,), ChainParams(Sg=1))
    assert len(a.participants) == len(b.participants) == 2
    assert (a.id, b.id) == (2, 3)
    assert a.startHeight == b.startHeight == c.height + 1


def test_split_aborts_when_offspring_miss_groups():
    c = chain(1, [1, 9])
    with pytest.raises(mc.SplitAborted):
        mc.split_chain(c, (1, 9), ChainParams(Sg=2))
    c.pendingTx.extend(cd.H(b"t%d" % i) for i in range(500))
    assert not mc.split_decision(c, (1, 9), ChainParams(K=100, Sg=2))


def test_split_routes_pending_by_hash_half():
    c = chain(1, [2, 2, 2, 2])
    low = (2**200).to_bytes(32, "little")
    high = (2**255 + 7).to_bytes(32, "little")
    c.pendingTx.extend([low, high])
    a, b = mc.split_chain(c, (1,), ChainParams(Sg=1))
    assert list(a.pendingTx) == [low]
    assert list(b.pendingTx) == [high]
    assert cd.check_duty_conservation([a.dutyRange, b.dutyRange]) == []


# --- merge --------------------------------------------------------------------------------

def test_merge_target_closest_then_smaller():
    assert mc.merge_target(5, [3, 4, 5]) == 4
    assert mc.merge_target(5, [3, 7]) == 3
    assert mc.merge_target(5, [5]) is None
    assert mc.merge_target(5, [3, 4], exclude=[4]) == 3


def test_merged_ids():
    assert mc.merged_id([4, 5]) == 2
    assert mc.merged_id([3, 5, 6]) == 3
    assert mc.merged_id([4, 5, 3]) == 1


def test_three_way_merge_groups():
    assert mc.merge_groups({3: 5, 5: 6}) == [[3, 5, 6]]
    assert mc.merge_groups({4: 5, 6: 7}) == [[4, 5], [6, 7]]


def test_merge_chains_unions_duty_and_height():
    root = DutyRange.genesis()
    d2, d3 = cd.duty_range_split(root, 1)
    a = chain(2, [1, 2], d2, height=7)
    b = chain(3, [3, 4], d3, height=9)
    m = mc.merge_chains([a, b], Sg=1)
    assert m.id == 1
    assert m.startHeight == m.height == 10
    assert sorted(m.claims()) == [1, 2, 3, 4]
    assert cd.check_duty_conservation([m.dutyRange]) == []
    assert m.kind() is BlockKind.OB


def test_merge_needs_safe_number_of_approvers():
    bl = (1.0,)
    profile = GroupProfile(1, bl, 10.0, 20.0, 20)
    a = chain(4, [1] * 10)
    b = chain(5, [1] * 10)
    with pytest.raises(mc.MergePending):
        mc.merge_chains([a, b], approvers=a.participants[:2], bl=bl, profile=profile)
    m = mc.merge_chains([a, b], bl=bl, profile=profile)
    assert m.id == 2 and len(m.participants) == 20


def test_merge_coordinator_escalates_after_timeout():
    co = mc.MergeCoordinator(timeout=2)
    live = [3, 4, 6]
    assert co.request(5, live + [5]) == 4
    for _ in range(2):
        assert co.tick(live + [5]) == []
    assert co.tick(live + [5]) == [5]
    assert co.targets[5] == 6
    for _ in range(2):
        co.tick(live + [5])
    assert co.tick(live + [5]) == [5]
    assert co.targets[5] == 3


def test_merge_triggers():
    params = ChainParams(K=10, Ti=4, Sg=1)
    c = chain(1, [1, 1, 1])
    c.pendingTx.extend(cd.H(b"t%d" % i) for i in range(params.K))
    assert mc.merge_trigger(c, (1,), params) is None
    for _ in range(5):
        mc.note_interval(c, params, accepted=False, sub_threshold=True)
    assert mc.merge_trigger(c, (1,), params) is MergeReason.LOCAL_HALT
    idle = chain(2, [1, 1, 1])
    for _ in range(mc.UNDERFILL_STREAK):
        mc.note_interval(idle, params, accepted=True, sub_threshold=False)
    assert mc.merge_trigger(idle, (1,), params) is MergeReason.UNDERFILL


# --- Pab formation ---------------------------------------------------------------------------

def test_prune_front_third_example():
    assert mc.prune_claims([8, 2, 2]) == [2, 2]
    assert mc.prune_claims([2, 2, 2]) == [2, 2, 2]
    kept = mc.prune_front_third([naj(1, 8), naj(2, 2), naj(3, 2)])
    assert sorted(n.intendedDifficulty for n in kept) == [2, 2]


def test_single_element_shuffle_is_identity():
    h = cd.H(b"x")
    assert mc.mgbh_shuffle([h], cd.H(b"m")) == [h]


def test_single_naj_single_chain():
    n = naj(1, 5)
    sec = mc.new_participant_section([n], cd.H(b"m"), nc=1, K=10)
    assert sec == (((n.hash(), 5),),)
    assert mc.subsection_destination(cd.H(b"p"), cd.H(b"m"), 0, [7]) == 7


def test_select_new_participants_ranks_by_group_middle():
    bl = (0, 10)
    # group 0 middle is 5, group 1 uses bl(Sg) = bl(Sg-1) so its middle is 10
    najs = [naj(i, d) for i, d in enumerate([1, 5, 6, 9, 10, 30, 11])]
    chosen = mc.select_new_participants(najs, bl, K=4)
    assert sorted(n.intendedDifficulty for n in chosen) == [5, 6, 10, 11]


def test_reassignment_section_covers_every_member_once():
    psl = [naj(i, 10 + i) for i in range(30)]
    sec = mc.reassignment_section(psl, cd.H(b"m"), [2, 3, 5])
    listed = [h for _, hs in sec for h in hs]
    assert sorted(listed) == sorted(n.hash() for n in psl)
    assert {c for c, _ in sec} <= {2, 3, 5}


def test_form_pab_requires_pab_height():
    c = chain(1, [1, 2])
    with pytest.raises(ValueError):
        mc.form_pab(c, cd.H(b"m"), bl=(1,), ranked_ids=[1], params=ChainParams(Sg=1, Ti=4))


def test_form_pab_filters_unqualified_and_wrong_prev():
    params = ChainParams(K=4, Ti=4, Sg=1, qualification=TOY)
    c = chain(1, [1, 2], height=1)
    c.startHeight = 0
    prev = cd.H(b"fub")
    good = [n for n in (naj(i, 3, prev) for i in range(40)) if n.qualifies(params.multiple)][:2]
    bad_prev = naj(99, 3, cd.H(b"other"))
    c.pendingNAJ.extend(good + [bad_prev])
    box = mc.form_pab(c, cd.H(b"m"), bl=(1,), ranked_ids=[1, 2], params=params, expected_prev=prev)
    assert {h for h, _, _ in box.entries()} == {n.hash() for n in good}


def test_form_pab_lists_retiring_members():
    params = ChainParams(K=4, Ti=4, Sg=1)
    c = chain(1, [], height=5)
    c.startHeight = 4
    old, fresh = miner("old", 3, join=3), miner("new", 4, join=7)
    for m in (old, fresh):
        c.engine.register(m)
        c.najOf[m.identityKey] = naj(int.from_bytes(m.identityKey[:2], "little"), int(m.cpClaim))
    box = mc.form_pab(c, cd.H(b"m"), bl=(1,), ranked_ids=[1, 2], params=params)
    listed = [h for _, hs in box.reassignmentSection for h in hs]
    assert listed == [c.najOf[old.identityKey].hash()]


# --- assignment verification ----------------------------------------------------------------

def _box_and_plan(najs, mgbh, ranked, K=16):
    sec = mc.new_participant_section(najs, mgbh, len(ranked), K)
    box = cd.AssignmentBox(sec, (), capacity=K)
    block = pab_block(box, mgbh)
    return box, block, mc.assignment_plan(box, block.hash(), mgbh, ranked)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 9), st.binary(min_size=32, max_size=32))
def test_form_and_verify_agree(count, nc, mgbh):
    ranked = cd.GlobalBlockHeader(tuple((c, cd.ZERO_HASH) for c in range(2, 2 + nc))).ranked_ids()
    najs = [naj(i, 1 + i) for i in range(count)]
    box, block, plan = _box_and_plan(najs, mgbh, ranked)
    for n in najs:
        nj = mc.make_new_join(box, n, block.hash(), 1)
        for cid in ranked:
            v = mc.verify_assignment(nj, n, block, mgbh, ranked, cid, block.hash())
            if cid == plan[n.hash()]:
                assert v.valid
            else:
                assert v.reason is AssignmentReject.WRONG_DESTINATION


def test_verify_replay_stale_and_bad_proof():
    mgbh = cd.H(b"m")
    ranked = [2, 3]
    najs = [naj(i, 5) for i in range(4)]
    box, block, plan = _box_and_plan(najs, mgbh, ranked)
    n = najs[0]
    nj = mc.make_new_join(box, n, block.hash(), 1)
    dest = plan[n.hash()]
    used: set[bytes] = set()
    assert mc.verify_assignment(nj, n, block, mgbh, ranked, dest, block.hash(), used)
    again = mc.verify_assignment(nj, n, block, mgbh, ranked, dest, block.hash(), used)
    assert again.reason is AssignmentReject.REPLAY
    stale = mc.verify_assignment(nj, n, block, mgbh, ranked, dest, cd.H(b"newer pab"))
    assert stale.reason is AssignmentReject.STALE_PAB
    forged = mc.verify_assignment(nj, naj(77, 5), block, mgbh, ranked, dest, block.hash())
    assert forged.reason is AssignmentReject.BAD_PROOF


def test_shuffle_sensitivity_to_one_mgbh_bit():
    rnd = random.Random(11)
    ranked = [2, 3, 4, 5, 6, 7, 8, 9]
    changed = 0
    trials = 100
    for t in range(trials):
        najs = [naj(rnd.getrandbits(32), rnd.randint(1, 100)) for _ in range(16)]
        mgbh = rnd.getrandbits(256).to_bytes(32, "little")
        bit = rnd.randrange(256)
        flipped = bytearray(mgbh)
        flipped[bit // 8] ^= 1 << (bit % 8)
        _, _, a = _box_and_plan(najs, mgbh, ranked)
        _, _, b = _box_and_plan(najs, bytes(flipped), ranked)
        changed += a != b
    assert changed >= trials // 2


# --- Fub and power adjustment -----------------------------------------------------------------

def _joins(claims, start=0):
    return [(cd.NewJoin(0, c, 1, cd.ZERO_HASH, ()), naj(start + i, c)) for i, c in enumerate(claims)]


def test_fub_balanced_claims_unchanged():
    c = chain(1, [4, 5, 6, 7])
    res = mc.form_fub_and_adjust(c, _joins([5, 6]), bl=(1, 6))
    assert res.adjusted == {} and not res.mustMerge
    assert sorted(c.claims()) == [4, 5, 5, 6, 6, 7]


def test_fub_whale_clipped_to_top_boundary():
    c = chain(1, [4, 5, 6, 7])
    res = mc.form_fub_and_adjust(c, _joins([200]), bl=(1, 6))
    assert list(res.adjusted.values()) == [6]
    assert not res.mustMerge
    assert max(c.claims()) == 7


def test_fub_clipping_insufficient_flags_merge():
    c = chain(1, [1, 1, 1, 50])
    res = mc.form_fub_and_adjust(c, _joins([60]), bl=(1, 40))
    assert res.adjusted and res.mustMerge


# --- crosschain -------------------------------------------------------------------------------

def _pair():
    d2, d3 = cd.duty_range_split(DutyRange.genesis(), 1)
    return chain(2, [1], d2), chain(3, [1], d3)


def test_crosschain_window():
    o, d = _pair()
    tx = (5).to_bytes(32, "little")
    assert mc.crosschain_transfer(o, d, tx, 10, confirm_height=12) is TransferStatus.TRANSFERRED
    assert mc.crosschain_transfer(o, d, tx, 10, confirm_height=13) is TransferStatus.REJECTED
    assert mc.crosschain_transfer(o, d, tx, 10, confirm_height=13, cancel_at=13) is TransferStatus.CANCELLED
    assert mc.crosschain_transfer(o, d, tx, 10) is TransferStatus.PENDING_COMPLETE


def test_crosschain_cancel_waits_for_window_and_respects_confirm():
    o, d = _pair()
    tx = (9).to_bytes(32, "little")
    t = mc.request_transfer(o, d.id, tx, 20)
    assert mc.cancel_transfer(t, 21, []) is TransferStatus.REQUESTED
    spend: set[bytes] = set()
    assert mc.confirm_transfer(t, 22, spend) is TransferStatus.TRANSFERRED and tx in spend
    confirm = [cd.CrosschainEntry("confirm", tx, o.id, d.id, t.proof)]
    assert mc.cancel_transfer(t, 30, [confirm]) is TransferStatus.TRANSFERRED


def test_crosschain_requires_governing_origin():
    o, d = _pair()
    with pytest.raises(ValueError):
        mc.request_transfer(o, d.id, (2**255 + 1).to_bytes(32, "little"), 0, source=1)
    assert mc.request_transfer(o, d.id, (5).to_bytes(32, "little"), 0, source=1).status is TransferStatus.REQUESTED


# --- disputes ---------------------------------------------------------------------------------

def _grind(bh: bytes, m: MinerRecord, count: int = 2) -> list[int]:
    out, n = [], m.tryRange[0]
    while len(out) < count:
        if mw.share_difficulty(bh, n) >= mw.SHARE_FRACTION * m.cpClaim:
            out.append(n)
        n += 1
    return out


def _members(k: int) -> list[MinerRecord]:
    ms = [miner(f"d{i}", TOY) for i in range(k)]
    mw.assign_try_ranges(ms)
    return ms


def _candidate(bh: bytes, signers, keyed=None, ok=True) -> DisputeCandidate:
    shares = []
    for m in signers:
        key = keyed or m.identityKey
        shares += [(m.identityKey, cd.Share.create(bh, n, key)) for n in _grind(bh, m)]
    return DisputeCandidate(bh, 5, tuple(shares), ok)


def test_dispute_genuine_majority_wins_forgery_rejected():
    ms = _members(4)
    good, bad = cd.H(b"genuine"), cd.H(b"forged")
    outsider = miner("outsider", TOY)
    outsider.tryRange = ms[0].tryRange
    cands = [_candidate(good, ms[:3]), _candidate(bad, [outsider] * 3)]
    res = mc.resolve_dispute(cands, ms)
    assert res.outcome is DisputeOutcome.RESOLVED and res.winner == good
    assert res.support[bad] == 0


def test_dispute_wrong_global_entry_never_wins():
    ms = _members(3)
    h = cd.H(b"x")
    res = mc.resolve_dispute([_candidate(h, ms, ok=False)], ms)
    assert res.outcome is DisputeOutcome.UNRESOLVED


def test_dispute_split_support_unresolved():
    ms = _members(4)
    a, b = cd.H(b"a"), cd.H(b"b")
    res = mc.resolve_dispute([_candidate(a, ms[:2]), _candidate(b, ms[2:])], ms)
    assert res.outcome is DisputeOutcome.UNRESOLVED and res.winner is None


# --- cadence and lifelength ---------------------------------------------------------------------

def test_cadence_restarts_after_split():
    c = chain(1, [1, 1, 1, 1], height=6)
    assert [c.kind(h).value for h in range(6, 10)] == ["Ob", "Pab", "Ob", "Fub"]
    a, _ = mc.split_chain(c, (1,), ChainParams(Sg=1))
    assert a.kind().value == "Ob"
    assert a.kind(a.startHeight + 1) is BlockKind.PAB


def test_ti_must_be_multiple_of_four():
    with pytest.raises(ValueError):
        ChainParams(Ti=10)


@pytest.mark.parametrize("Ti", [4, 8, 20])
@pytest.mark.parametrize("offset", [0, 1, 3])
def test_lifelength_never_exceeds_ti(Ti, offset):
    """Members leave at the Fub after the Pab that lists them; nobody stays past Ti."""
    c = chain(1, [], height=0)
    c.startHeight = offset
    joined: dict[bytes, int] = {}
    served = []
    n = 0
    for h in range(offset, offset + 12 * Ti):
        kind = c.kind(h)
        if kind is BlockKind.PAB:
            leaving = mc.retiring_members(c, h, Ti)
        if kind is BlockKind.FUB:
            for m in leaving:
                served.append(h - joined.pop(m.identityKey))
            c.engine.expel([m.identityKey for m in leaving])
            for _ in range(2):
                m = miner(f"n{n}", 1, join=h)
                n += 1
                joined[m.identityKey] = h
                c.engine.register(m)
        if h == offset:
            m = miner("founder", 1, join=h)
            joined[m.identityKey] = m.joinHeight
            c.engine.register(m)
    assert served and max(served) <= Ti
    assert served.count(Ti) >= len(served) - 2


@pytest.mark.parametrize("reported,observed,ok", [
    (100, 100, True), (110, 100, True), (90, 100, True), (111, 100, False), (89, 100, False),
    (0, 0, True), (1, 0, False),
])
def test_trans_onhold_cross_check(reported, observed, ok):
    assert mc.trans_onhold_plausible(reported, observed) is ok
