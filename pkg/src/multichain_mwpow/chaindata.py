"""Data model: chain ids, digests, Merkle commitments, duty ranges and wire structures.

All binary encodings are fixed-width little-endian. Sizes of the structures
that travel between miners are exact and are what the network simulator charges
for bandwidth.
"""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
import json
import math
import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Iterable, Mapping, Sequence

HASH_BITS = 256
HASH_SPACE = 1 << HASH_BITS
HASH_MAX = HASH_SPACE - 1
DIFFICULTY_TARGET = 1 << 224
ZERO_HASH = bytes(32)
TX_SIZE_BYTES = 500
U32_MAX = 0xFFFFFFFF

ChainId = int

# --- hashing ------------------------------------------------------------------

_HASHERS: dict[str, Callable[[bytes], bytes]] = {
    "sha256": lambda data: hashlib.sha256(data).digest(),
    "blake2b": lambda data: hashlib.blake2b(data, digest_size=32).digest(),
}
_active_hash = _HASHERS["sha256"]
_active_name = "sha256"


def set_hash_function(name: str) -> None:
    """Select the 256-bit hash used everywhere (``sha256`` or ``blake2b``)."""
    global _active_hash, _active_name
    if name not in _HASHERS:
        raise ValueError(f"unknown hash function {name!r}; choose from {sorted(_HASHERS)}")
    _active_hash = _HASHERS[name]
    _active_name = name


def hash_function_name() -> str:
    return _active_name


def H(data: bytes) -> bytes:
    return _active_hash(data)


def hash_int(digest: bytes) -> int:
    return int.from_bytes(digest, "little")


def int_hash(value: int) -> bytes:
    return (value % HASH_SPACE).to_bytes(32, "little")


def xor_bytes(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


# --- difficulty ---------------------------------------------------------------

def difficulty_of(digest: bytes | int) -> float:
    """Difficulty ratio of a hash: the fixed target divided by the hash value."""
    value = digest if isinstance(digest, int) else hash_int(digest)
    if value == 0:
        return math.inf
    return DIFFICULTY_TARGET / value


def meets(digest: bytes | int, difficulty: float) -> bool:
    value = digest if isinstance(digest, int) else hash_int(digest)
    if value == 0:
        return True
    # exact rational comparison; floats lose the low bits of a 256-bit value
    return Fraction(difficulty) * value <= DIFFICULTY_TARGET


def target_for(difficulty: float) -> int:
    """Largest hash value that still meets ``difficulty``."""
    if difficulty <= 0:
        return HASH_MAX
    return min(HASH_MAX, math.floor(DIFFICULTY_TARGET / Fraction(difficulty)))


# --- chain ids ----------------------------------------------------------------

def _check_id(v: int) -> None:
    if v < 1:
        raise ValueError(f"chain id must be >= 1, got {v}")


def chain_id_split(v: ChainId) -> tuple[ChainId, ChainId]:
    _check_id(v)
    return 2 * v, 2 * v + 1


def are_siblings(a: ChainId, b: ChainId) -> bool:
    return a != b and a > 1 and b > 1 and a // 2 == b // 2


def chain_id_merge(a: ChainId, b: ChainId) -> ChainId:
    _check_id(a)
    _check_id(b)
    if a == b:
        raise ValueError("cannot merge a chain with itself")
    if are_siblings(a, b):
        return a // 2
    return min(a, b)


def chain_label(v: ChainId) -> str:
    return f"C{v}"


# --- Merkle commitments ---------------------------------------------------------
#
# Parents hash the sorted pair of children, so a branch is just the list of
# sibling digests and needs no direction bits.

def _parent(a: bytes, b: bytes) -> bytes:
    return H(a + b) if a <= b else H(b + a)


def _levels(items: Sequence[bytes]) -> list[list[bytes]]:
    if not items:
        raise ValueError("Merkle tree needs at least one leaf")
    levels = [list(items)]
    while len(levels[-1]) > 1:
        cur = levels[-1]
        if len(cur) % 2:
            cur = cur + [cur[-1]]
        levels.append([_parent(cur[i], cur[i + 1]) for i in range(0, len(cur), 2)])
    return levels


def merkle_root(items: Sequence[bytes]) -> bytes:
    return _levels(items)[-1][0]


def merkle_branch(items: Sequence[bytes], index: int) -> list[bytes]:
    if not 0 <= index < len(items):
        raise IndexError(f"leaf index {index} out of range for {len(items)} leaves")
    branch = []
    for level in _levels(items)[:-1]:
        sib = index ^ 1
        branch.append(level[sib] if sib < len(level) else level[index])
        index //= 2
    return branch


def merkle_verify(leaf: bytes, branch: Sequence[bytes], root: bytes) -> bool:
    node = leaf
    for sib in branch:
        node = _parent(node, sib)
    return node == root


def padded_leaves(items: Sequence[bytes], capacity: int) -> list[bytes]:
    """Pad a leaf list with zero digests up to ``capacity`` (at least one leaf)."""
    if len(items) > capacity:
        raise ValueError(f"{len(items)} leaves exceed capacity {capacity}")
    return list(items) + [ZERO_HASH] * (max(capacity, 1) - len(items))


# --- duty ranges ----------------------------------------------------------------

Interval = tuple[int, int]


def _normalize(intervals: Iterable[Interval]) -> tuple[Interval, ...]:
    out: list[list[int]] = []
    for lo, hi in sorted(intervals):
        if lo > hi:
            continue
        if out and lo <= out[-1][1] + 1:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return tuple((a, b) for a, b in out)


@dataclass(frozen=True)
class DutyRange:
    """Hash intervals (inclusive) a chain governs, keyed by the chain whose blocks hold the items."""

    segments: Mapping[ChainId, tuple[Interval, ...]]

    def __post_init__(self) -> None:
        clean = {}
        for k, v in self.segments.items():
            if v and isinstance(v[0], int):
                v = (tuple(v),)
            norm = _normalize(v)
            if norm:
                clean[int(k)] = norm
        object.__setattr__(self, "segments", dict(sorted(clean.items())))

    @classmethod
    def genesis(cls, root: ChainId = 1) -> "DutyRange":
        return cls({root: ((0, HASH_MAX),)})

    def governs(self, source: ChainId, h: int) -> bool:
        return any(lo <= h <= hi for lo, hi in self.segments.get(source, ()))

    def keys(self) -> list[ChainId]:
        return list(self.segments)

    def restrict(self, keys: Iterable[ChainId]) -> "DutyRange":
        ks = set(keys)
        return DutyRange({k: v for k, v in self.segments.items() if k in ks})

    def size(self, source: ChainId) -> int:
        return sum(hi - lo + 1 for lo, hi in self.segments.get(source, ()))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DutyRange) and dict(self.segments) == dict(other.segments)

    def __hash__(self) -> int:
        return hash(tuple(self.segments.items()))


def _in_subtree(key: ChainId, root: ChainId) -> bool:
    while key > root:
        key //= 2
    return key == root


def duty_range_split(d: DutyRange, self_id: ChainId) -> tuple[DutyRange, DutyRange]:
    """Halve every inherited interval between the two children of ``self_id``.

    A key the parent owns outright that names a chain in one child's subtree
    (for instance after a sibling reunion) goes to that child whole; a child's
    own id, when not inherited, is a fresh key covering the full space.
    """
    even, odd = chain_id_split(self_id)
    lower: dict[ChainId, list[Interval]] = {}
    upper: dict[ChainId, list[Interval]] = {}
    for key, intervals in d.segments.items():
        whole = d.size(key) == HASH_SPACE
        if whole and _in_subtree(key, even):
            lower[key] = list(intervals)
            continue
        if whole and _in_subtree(key, odd):
            upper[key] = list(intervals)
            continue
        for lo, hi in intervals:
            mid = (lo + hi) // 2
            lower.setdefault(key, []).append((lo, mid))
            if mid + 1 <= hi:
                upper.setdefault(key, []).append((mid + 1, hi))
    lower.setdefault(even, [(0, HASH_MAX)])
    upper.setdefault(odd, [(0, HASH_MAX)])
    return DutyRange(lower), DutyRange(upper)


def duty_range_merge(a: DutyRange, b: DutyRange) -> DutyRange:
    merged: dict[ChainId, list[Interval]] = {}
    for d in (a, b):
        for key, intervals in d.segments.items():
            merged.setdefault(key, []).extend(intervals)
    return DutyRange(merged)


def check_duty_conservation(ranges: Iterable[DutyRange]) -> list[str]:
    """Problems found when the given ranges should partition every key's space.

    Returns an empty list when, for every key mentioned, the intervals are
    pairwise disjoint and cover [0, 2^256).
    """
    per_key: dict[ChainId, list[Interval]] = {}
    for d in ranges:
        for key, intervals in d.segments.items():
            per_key.setdefault(key, []).extend(intervals)
    problems = []
    for key, intervals in sorted(per_key.items()):
        intervals.sort()
        expect = 0
        for lo, hi in intervals:
            if lo < expect:
                problems.append(f"C{key}: overlap at {lo}")
            elif lo > expect:
                problems.append(f"C{key}: gap [{expect}, {lo - 1}]")
            expect = max(expect, hi + 1)
        if expect != HASH_SPACE:
            problems.append(f"C{key}: coverage ends at {expect}")
    return problems


class DutyRouter:
    """Fast lookup of the live chain governing a hash for one source key."""

    def __init__(self, owners: Mapping[ChainId, DutyRange], source: ChainId = 1) -> None:
        pts = []
        for cid, d in owners.items():
            for lo, hi in d.segments.get(source, ()):
                pts.append((lo, hi, cid))
        pts.sort()
        self._starts = [p[0] for p in pts]
        self._ends = [p[1] for p in pts]
        self._owners = [p[2] for p in pts]

    def route(self, h: int) -> ChainId | None:
        i = bisect_right(self._starts, h) - 1
        if i >= 0 and h <= self._ends[i]:
            return self._owners[i]
        return None


# --- wire structures --------------------------------------------------------------

def _u32(x: int) -> bytes:
    x = int(x)
    if not 0 <= x <= U32_MAX:
        raise ValueError(f"value {x} does not fit 32 bits")
    return struct.pack("<I", x)


def _h32(b: bytes) -> bytes:
    if len(b) != 32:
        raise ValueError(f"expected a 32-byte digest, got {len(b)} bytes")
    return bytes(b)


@dataclass(frozen=True)
class BlockHeader:
    """Consensus header; the mining nonce travels in the share that announced the block."""

    prevHash: bytes
    mgbh: bytes
    txMerkleRoot: bytes
    chainpower: int
    transOnhold: int
    thresholdChainpower: int
    numParticipants: int
    timestamp: int
    entranceDifficulty: int
    acceptanceDifficulty: int
    blCandidate: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "blCandidate", tuple(int(x) for x in self.blCandidate))
        if self.thresholdChainpower > self.chainpower:
            raise ValueError("threshold chainpower exceeds chainpower")
        if any(b < a for a, b in zip(self.blCandidate, self.blCandidate[1:])):
            raise ValueError("blCandidate must be ascending")

    @property
    def Sg(self) -> int:
        return len(self.blCandidate)

    def encode(self) -> bytes:
        head = _h32(self.prevHash) + _h32(self.mgbh) + _h32(self.txMerkleRoot)
        ints = (
            self.chainpower, self.transOnhold, self.thresholdChainpower, self.numParticipants,
            self.timestamp, self.entranceDifficulty, self.acceptanceDifficulty,
        )
        return head + b"".join(map(_u32, ints)) + b"".join(map(_u32, self.blCandidate))

    @classmethod
    def decode(cls, data: bytes) -> "BlockHeader":
        if len(data) < 124 or (len(data) - 124) % 4:
            raise ValueError(f"bad header length {len(data)}")
        sg = (len(data) - 124) // 4
        ints = struct.unpack_from("<7I", data, 96)
        bl = struct.unpack_from(f"<{sg}I", data, 124)
        return cls(data[:32], data[32:64], data[64:96], *ints, tuple(bl))

    def hash(self, nonce: int = 0) -> bytes:
        return H(self.encode() + int_hash(nonce))


def sign(identity_key: bytes, message: bytes) -> bytes:
    """Keyed-hash stand-in for a 256-bit signature."""
    return hmac.new(identity_key, message, hashlib.sha256).digest()


@dataclass(frozen=True)
class Share:
    blockTag: int
    nonce: int
    signature: bytes

    BITS = 4 + 256 + 256

    def __post_init__(self) -> None:
        if not 0 <= self.blockTag < 16:
            raise ValueError("block tag is 4 bits")
        if not 0 <= self.nonce < HASH_SPACE:
            raise ValueError("nonce is 256 bits")
        _h32(self.signature)

    @staticmethod
    def message(blockTag: int, nonce: int) -> bytes:
        return bytes([blockTag]) + int_hash(nonce)

    @classmethod
    def create(cls, block_hash: bytes, nonce: int, identity_key: bytes) -> "Share":
        tag = block_tag(block_hash)
        return cls(tag, nonce, sign(identity_key, cls.message(tag, nonce)))

    def verify(self, identity_key: bytes) -> bool:
        return hmac.compare_digest(self.signature, sign(identity_key, self.message(self.blockTag, self.nonce)))

    def to_bits(self) -> int:
        """The 516-bit wire value: tag in the low nibble, then nonce, then signature."""
        return self.blockTag | (self.nonce << 4) | (hash_int(self.signature) << 260)

    @classmethod
    def from_bits(cls, value: int) -> "Share":
        return cls(value & 0xF, (value >> 4) & HASH_MAX, int_hash(value >> 260))

    def encode(self) -> bytes:
        """Byte-aligned form (65 bytes, four padding bits); the wire ledger uses ``BITS``."""
        return self.to_bits().to_bytes(65, "little")

    @classmethod
    def decode(cls, data: bytes) -> "Share":
        if len(data) != 65:
            raise ValueError("share encoding is 65 bytes")
        value = int.from_bytes(data, "little")
        if value >> cls.BITS:
            raise ValueError("padding bits must be zero")
        return cls.from_bits(value)


def block_tag(block_hash: bytes) -> int:
    return hash_int(block_hash) & 0xF


def pack_shares(shares: Sequence[Share]) -> bytes:
    """Bit-pack shares back to back; length is ceil(516 * count / 8) bytes."""
    acc = 0
    for i, s in enumerate(shares):
        acc |= s.to_bits() << (i * Share.BITS)
    return acc.to_bytes((len(shares) * Share.BITS + 7) // 8, "little")


def unpack_shares(data: bytes, count: int) -> list[Share]:
    acc = int.from_bytes(data, "little")
    mask = (1 << Share.BITS) - 1
    return [Share.from_bits((acc >> (i * Share.BITS)) & mask) for i in range(count)]


@dataclass(frozen=True)
class NewAssignJoin:
    hashPrevBlock: bytes
    intendedDifficulty: int
    walletAddress: bytes
    identityKey: bytes
    nonce: int

    def encode(self) -> bytes:
        return (
            _h32(self.hashPrevBlock) + _u32(self.intendedDifficulty) + _h32(self.walletAddress)
            + _h32(self.identityKey) + int_hash(self.nonce)
        )

    @classmethod
    def decode(cls, data: bytes) -> "NewAssignJoin":
        if len(data) != 132:
            raise ValueError("NewAssignJoin encoding is 132 bytes")
        (ind,) = struct.unpack_from("<I", data, 32)
        return cls(data[:32], ind, data[36:68], data[68:100], hash_int(data[100:132]))

    def hash(self) -> bytes:
        return H(self.encode())

    def qualifies(self, multiple: float) -> bool:
        """Whether the structure's own hash meets ``multiple`` times the intended difficulty."""
        return meets(self.hash(), multiple * self.intendedDifficulty)


@dataclass(frozen=True)
class NewJoin:
    """Proof that a NAJ was assigned to a chain; transmitted together with that NAJ."""

    ll: int
    intendedDifficulty: int
    assignmentChainId: ChainId
    blockHeaderHash: bytes
    merkleBranch: tuple[bytes, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "merkleBranch", tuple(self.merkleBranch))

    def encode(self) -> bytes:
        return (
            _u32(self.ll) + _u32(self.intendedDifficulty) + _u32(self.assignmentChainId)
            + _h32(self.blockHeaderHash) + b"".join(_h32(b) for b in self.merkleBranch)
        )

    @classmethod
    def decode(cls, data: bytes) -> "NewJoin":
        if len(data) < 44 or (len(data) - 44) % 32:
            raise ValueError(f"bad NewJoin length {len(data)}")
        ll, ind, cid = struct.unpack_from("<3I", data, 0)
        branch = tuple(data[i:i + 32] for i in range(44, len(data), 32))
        return cls(ll, ind, cid, data[12:44], branch)

    def key(self) -> bytes:
        return H(self.encode())


@dataclass(frozen=True)
class Transaction:
    id: bytes
    inputs: tuple[bytes, ...] = ()

    MAX_INPUTS = (TX_SIZE_BYTES - 36) // 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if len(self.inputs) > self.MAX_INPUTS:
            raise ValueError(f"at most {self.MAX_INPUTS} inputs fit in {TX_SIZE_BYTES} bytes")

    @property
    def sizeBytes(self) -> int:
        return TX_SIZE_BYTES

    def encode(self) -> bytes:
        body = _h32(self.id) + _u32(len(self.inputs)) + b"".join(_h32(i) for i in self.inputs)
        return body + bytes(TX_SIZE_BYTES - len(body))

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        if len(data) != TX_SIZE_BYTES:
            raise ValueError("transaction encoding is 500 bytes")
        (k,) = struct.unpack_from("<I", data, 32)
        return cls(data[:32], tuple(data[36 + 32 * i:68 + 32 * i] for i in range(k)))


def assignment_leaf(naj_hash: bytes, ll: int, intended_difficulty: int) -> bytes:
    return H(_h32(naj_hash) + _u32(ll) + _u32(intended_difficulty))


@dataclass(frozen=True)
class AssignmentBox:
    """New-participant subsections (indexed by Ll) plus reassignment subsections.

    The new-participant tree is padded to ``capacity`` leaves so that every
    branch has exactly ceil(log2 capacity) siblings.
    """

    newParticipantSection: tuple[tuple[tuple[bytes, int], ...], ...]
    reassignmentSection: tuple[tuple[ChainId, tuple[bytes, ...]], ...]
    capacity: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "newParticipantSection", tuple(tuple((bytes(h), int(d)) for h, d in sub) for sub in self.newParticipantSection)
        )
        object.__setattr__(
            self, "reassignmentSection", tuple(sorted((int(c), tuple(v)) for c, v in self.reassignmentSection))
        )

    def entries(self) -> list[tuple[bytes, int, int]]:
        """(najHash, Ll, intendedDifficulty) in leaf order."""
        return [(h, ll, d) for ll, sub in enumerate(self.newParticipantSection) for h, d in sub]

    def leaves(self) -> list[bytes]:
        return padded_leaves([assignment_leaf(h, ll, d) for h, ll, d in self.entries()], self.capacity)

    def new_participant_root(self) -> bytes:
        return merkle_root(self.leaves())

    def reassignment_root(self) -> bytes:
        items = [H(_u32(c) + b"".join(keys)) for c, keys in self.reassignmentSection]
        return merkle_root(items) if items else ZERO_HASH

    def root(self) -> bytes:
        return H(self.new_participant_root() + self.reassignment_root())

    def branch_for(self, naj_hash: bytes) -> tuple[int, int, list[bytes]]:
        """(Ll, intendedDifficulty, branch) for a NAJ in the new-participant section."""
        for idx, (h, ll, d) in enumerate(self.entries()):
            if h == naj_hash:
                return ll, d, merkle_branch(self.leaves(), idx)
        raise KeyError("NAJ not in assignment box")

    def depth(self) -> int:
        return branch_depth(self.capacity)


def branch_depth(capacity: int) -> int:
    return max(0, math.ceil(math.log2(capacity))) if capacity > 1 else 0


@dataclass(frozen=True)
class GlobalBlockHeader:
    entries: tuple[tuple[ChainId, bytes], ...]

    def __post_init__(self) -> None:
        ents = tuple(sorted((int(c), bytes(h)) for c, h in self.entries))
        ids = [c for c, _ in ents]
        if len(set(ids)) != len(ids):
            raise ValueError("one entry per chain")
        object.__setattr__(self, "entries", ents)

    @property
    def merkleRoot(self) -> bytes:
        if not self.entries:
            return ZERO_HASH
        return merkle_root([H(_u32(c) + h) for c, h in self.entries])

    def ranked_ids(self) -> list[ChainId]:
        """Chain ids in alphabetical order of their labels."""
        return sorted((c for c, _ in self.entries), key=chain_label)

    def get(self, cid: ChainId) -> bytes | None:
        for c, h in self.entries:
            if c == cid:
                return h
        return None

    def with_entry(self, cid: ChainId, h: bytes) -> "GlobalBlockHeader":
        rest = [(c, x) for c, x in self.entries if c != cid]
        return GlobalBlockHeader(tuple(rest) + ((cid, h),))

    def without(self, cid: ChainId) -> "GlobalBlockHeader":
        return GlobalBlockHeader(tuple((c, x) for c, x in self.entries if c != cid))


class BlockKind(str, Enum):
    OB = "Ob"
    PAB = "Pab"
    FUB = "Fub"


CADENCE = (BlockKind.OB, BlockKind.PAB, BlockKind.OB, BlockKind.FUB)


def kind_at(position: int) -> BlockKind:
    """Kind of the block at ``position`` (0-based) since the chain's first block."""
    return CADENCE[position % 4]


@dataclass(frozen=True)
class CrosschainEntry:
    kind: str  # "request", "confirm" or "cancel"
    txId: bytes
    origin: ChainId
    dest: ChainId
    proof: tuple[bytes, ...] = ()


@dataclass
class Block:
    header: BlockHeader
    kind: BlockKind
    height: int = 0
    nonce: int = 0
    transactions: list[Transaction] = field(default_factory=list)
    shares: list[Share] = field(default_factory=list)
    crosschainSection: list[CrosschainEntry] = field(default_factory=list)
    participantList: list[bytes] = field(default_factory=list)
    assignmentBox: AssignmentBox | None = None
    newJoins: list[tuple[NewJoin, NewAssignJoin]] = field(default_factory=list)
    coinbase: list[tuple[bytes, float]] = field(default_factory=list)
    chainLimit: int | None = None

    def __post_init__(self) -> None:
        if self.chainLimit is not None and len(self.transactions) > self.chainLimit:
            raise ValueError("block exceeds the chain limit")
        if self.assignmentBox is not None and self.kind is not BlockKind.PAB:
            raise ValueError("only a Pab carries an assignment box")
        if self.newJoins and self.kind is not BlockKind.FUB:
            raise ValueError("only a Fub carries new joins")

    def hash(self) -> bytes:
        return self.header.hash(self.nonce)

    def crosschain_root(self) -> bytes:
        if not self.crosschainSection:
            return ZERO_HASH
        return merkle_root([crosschain_leaf(e) for e in self.crosschainSection])


def crosschain_leaf(e: CrosschainEntry) -> bytes:
    return H(e.kind.encode() + e.txId + _u32(e.origin) + _u32(e.dest))


# --- size accounting --------------------------------------------------------------

STRUCTURE_KINDS = ("header", "share", "new_assign_join", "new_join", "transaction")


def structure_size(kind: str, Sg: int = 1, K: int = 2) -> int:
    """Wire size in bits of one structure."""
    if Sg < 1 or K < 2:
        raise ValueError("need Sg >= 1 and K >= 2")
    if kind == "header":
        return (124 + 4 * Sg) * 8
    if kind == "share":
        return Share.BITS
    if kind == "new_assign_join":
        return 132 * 8
    if kind == "new_join":
        return (12 + 32 + branch_depth(K) * 32) * 8
    if kind == "transaction":
        return TX_SIZE_BYTES * 8
    raise ValueError(f"unknown structure kind {kind!r}; choose from {STRUCTURE_KINDS}")


def structure_bytes(kind: str, Sg: int = 1, K: int = 2) -> float:
    return structure_size(kind, Sg, K) / 8


# --- JSON debug encoding ------------------------------------------------------------

def _jsonable(obj: Any) -> Any:
    if isinstance(obj, (bytes, bytearray)):
        return obj.hex()
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, int) and abs(obj) > 2**53:
        return hex(obj)
    return obj


def to_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True)
