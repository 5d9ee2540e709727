"""Authenticated append-only chain.

Transactions are the only thing that ever reaches the chain; they carry
pseudonymous ids and salted commitments, never names, measurements, or quiz
answers. Each transaction has a canonical byte encoding (see `codec`); its
id is the SHA-256 of that encoding, and the author signs the id. Blocks link
by header hash and are co-signed by an endorsement quorum of member
organizations; the header hash excludes the endorsements so every endorser
signs the same digest.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Optional, Union

from . import crypto
from .codec import Reader, Writer
from .errors import ChainError, EncodingError

ZERO_HASH = bytes(32)
ID_BOUND = 64


class Kind(str, enum.Enum):
    ORGANIZATION = "organization"
    PRACTITIONER = "practitioner"
    PATIENT = "patient"
    RESEARCHER = "researcher"
    PARTICIPANT = "participant"


_KIND_CODES = {k: i for i, k in enumerate(Kind)}
_KIND_BY_CODE = {i: k for k, i in _KIND_CODES.items()}


class Category(str, enum.Enum):
    VITALS = "vitals"
    MEDICATION = "medication"
    NOTES = "notes"
    TREATMENTS = "treatments"


_CATEGORY_CODES = {c: i for i, c in enumerate(Category)}
_CATEGORY_BY_CODE = {i: c for c, i in _CATEGORY_CODES.items()}


def parse_category(name: str) -> Category:
    try:
        return Category(name)
    except ValueError:
        raise EncodingError(f"unknown record category {name!r}") from None


@dataclass(frozen=True, order=True)
class PrincipalId:
    """Network identity: (kind, opaque id). Ids are 1-64 printable ASCII bytes."""

    kind: Kind
    id: str

    def __post_init__(self) -> None:
        if not 1 <= len(self.id) <= ID_BOUND:
            raise EncodingError(f"principal id length out of range: {self.id!r}")
        if not all(0x20 <= ord(ch) <= 0x7E for ch in self.id):
            raise EncodingError(f"principal id not printable ASCII: {self.id!r}")

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.id}"


def write_principal(w: Writer, p: PrincipalId) -> None:
    w.u8(_KIND_CODES[p.kind])
    w.string(p.id, bound=ID_BOUND)


def read_principal(r: Reader) -> PrincipalId:
    code = r.u8()
    if code not in _KIND_BY_CODE:
        raise EncodingError(f"unknown principal kind code {code}")
    return PrincipalId(_KIND_BY_CODE[code], r.string(bound=ID_BOUND))


def _write_categories(w: Writer, scope: frozenset[Category]) -> None:
    codes = sorted(_CATEGORY_CODES[c] for c in scope)
    w.u32(len(codes))
    for code in codes:
        w.u8(code)


def _read_categories(r: Reader) -> frozenset[Category]:
    n = r.u32()
    out = []
    for _ in range(n):
        code = r.u8()
        if code not in _CATEGORY_BY_CODE:
            raise EncodingError(f"unknown category code {code}")
        out.append(_CATEGORY_BY_CODE[code])
    return frozenset(out)


def _write_category(w: Writer, category: Category) -> None:
    w.u8(_CATEGORY_CODES[category])


def _read_category(r: Reader) -> Category:
    code = r.u8()
    if code not in _CATEGORY_BY_CODE:
        raise EncodingError(f"unknown category code {code}")
    return _CATEGORY_BY_CODE[code]


# ---------------------------------------------------------------------------
# Payloads. Field order inside encode/decode is the declared wire order.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegisterPrincipal:
    TAG = 1
    ACTION = "RegisterPrincipal"
    subject: PrincipalId
    public_key: bytes
    org_binding: Optional[PrincipalId] = None
    identity_commitment: Optional[bytes] = None

    def encode(self, w: Writer) -> None:
        write_principal(w, self.subject)
        w.raw(self.public_key, crypto.KEY_LEN)
        if self.org_binding is None:
            w.u8(0)
        else:
            w.u8(1)
            write_principal(w, self.org_binding)
        if self.identity_commitment is None:
            w.u8(0)
        else:
            w.u8(1)
            w.raw(self.identity_commitment, 32)

    @staticmethod
    def decode(r: Reader) -> "RegisterPrincipal":
        subject = read_principal(r)
        key = r.raw(crypto.KEY_LEN)
        binding = read_principal(r) if r.boolean() else None
        commit = r.raw(32) if r.boolean() else None
        return RegisterPrincipal(subject, key, binding, commit)

    def audit_subject(self) -> str:
        if self.subject.kind in (Kind.PATIENT, Kind.PARTICIPANT):
            return self.subject.id
        return ""

    def audit_detail(self) -> dict:
        detail: dict = {"kind": self.subject.kind.value, "id": self.subject.id}
        if self.org_binding is not None:
            detail["org"] = self.org_binding.id
        if self.identity_commitment is not None:
            detail["commitment"] = self.identity_commitment.hex()
        return detail


@dataclass(frozen=True)
class CreatePlan:
    TAG = 2
    ACTION = "CreatePlan"
    plan_id: str
    patient: PrincipalId
    member_orgs: frozenset[PrincipalId]
    practitioners: frozenset[tuple[PrincipalId, PrincipalId]]  # (practitioner, org)

    def encode(self, w: Writer) -> None:
        w.string(self.plan_id, bound=ID_BOUND)
        write_principal(w, self.patient)
        orgs = sorted(self.member_orgs)
        w.u32(len(orgs))
        for org in orgs:
            write_principal(w, org)
        pracs = sorted(self.practitioners)
        w.u32(len(pracs))
        for prac, org in pracs:
            write_principal(w, prac)
            write_principal(w, org)

    @staticmethod
    def decode(r: Reader) -> "CreatePlan":
        plan_id = r.string(bound=ID_BOUND)
        patient = read_principal(r)
        orgs = frozenset(read_principal(r) for _ in range(r.u32()))
        pracs = frozenset(
            (read_principal(r), read_principal(r)) for _ in range(r.u32())
        )
        return CreatePlan(plan_id, patient, orgs, pracs)

    def audit_subject(self) -> str:
        return self.patient.id

    def audit_detail(self) -> dict:
        return {
            "plan": self.plan_id,
            "orgs": sorted(o.id for o in self.member_orgs),
            "practitioners": sorted(f"{p.id}@{o.id}" for p, o in self.practitioners),
        }


@dataclass(frozen=True)
class GrantAccess:
    TAG = 3
    ACTION = "GrantAccess"
    grant_id: str
    plan_id: str
    grantor: PrincipalId
    grantee: PrincipalId
    scope: frozenset[Category]
    valid_from: int
    valid_until: int

    def encode(self, w: Writer) -> None:
        w.string(self.grant_id, bound=ID_BOUND)
        w.string(self.plan_id, bound=ID_BOUND)
        write_principal(w, self.grantor)
        write_principal(w, self.grantee)
        _write_categories(w, self.scope)
        w.u64(self.valid_from)
        w.u64(self.valid_until)

    @staticmethod
    def decode(r: Reader) -> "GrantAccess":
        return GrantAccess(
            r.string(bound=ID_BOUND),
            r.string(bound=ID_BOUND),
            read_principal(r),
            read_principal(r),
            _read_categories(r),
            r.u64(),
            r.u64(),
        )

    def audit_subject(self) -> str:
        return self.grantor.id

    def audit_detail(self) -> dict:
        return {
            "grant": self.grant_id,
            "plan": self.plan_id,
            "grantee": self.grantee.id,
            "scope": sorted(c.value for c in self.scope),
            "from": self.valid_from,
            "until": self.valid_until,
        }


@dataclass(frozen=True)
class RevokeAccess:
    TAG = 4
    ACTION = "RevokeAccess"
    grant_id: str
    patient: PrincipalId

    def encode(self, w: Writer) -> None:
        w.string(self.grant_id, bound=ID_BOUND)
        write_principal(w, self.patient)

    @staticmethod
    def decode(r: Reader) -> "RevokeAccess":
        return RevokeAccess(r.string(bound=ID_BOUND), read_principal(r))

    def audit_subject(self) -> str:
        return self.patient.id

    def audit_detail(self) -> dict:
        return {"grant": self.grant_id}


@dataclass(frozen=True)
class DataRequestRecorded:
    TAG = 5
    ACTION = "DataRequestRecorded"
    requester: PrincipalId
    requester_org: PrincipalId
    sender_org: PrincipalId
    patient: PrincipalId
    category: Category
    emergency: bool

    def encode(self, w: Writer) -> None:
        write_principal(w, self.requester)
        write_principal(w, self.requester_org)
        write_principal(w, self.sender_org)
        write_principal(w, self.patient)
        _write_category(w, self.category)
        w.boolean(self.emergency)

    @staticmethod
    def decode(r: Reader) -> "DataRequestRecorded":
        return DataRequestRecorded(
            read_principal(r),
            read_principal(r),
            read_principal(r),
            read_principal(r),
            _read_category(r),
            r.boolean(),
        )

    def audit_subject(self) -> str:
        return self.patient.id

    def audit_detail(self) -> dict:
        return {
            "requester": self.requester.id,
            "requester_org": self.requester_org.id,
            "sender_org": self.sender_org.id,
            "category": self.category.value,
            "emergency": self.emergency,
        }


@dataclass(frozen=True)
class AccessCompleted:
    TAG = 6
    ACTION = "AccessCompleted"
    request_tx: bytes
    patient: PrincipalId
    verdict: str  # allow | deny | allow_emergency
    reason: str
    record_count: int

    def encode(self, w: Writer) -> None:
        w.raw(self.request_tx, 32)
        write_principal(w, self.patient)
        w.string(self.verdict, bound=32)
        w.string(self.reason, bound=32)
        w.u32(self.record_count)

    @staticmethod
    def decode(r: Reader) -> "AccessCompleted":
        return AccessCompleted(
            r.raw(32),
            read_principal(r),
            r.string(bound=32),
            r.string(bound=32),
            r.u32(),
        )

    def audit_subject(self) -> str:
        return self.patient.id

    def audit_detail(self) -> dict:
        return {
            "request_tx": self.request_tx.hex(),
            "verdict": self.verdict,
            "reason": self.reason,
            "records": self.record_count,
        }


@dataclass(frozen=True)
class EmergencyAccess:
    TAG = 7
    ACTION = "EmergencyAccess"
    request_tx: bytes  # zero hash when invoked outside the exchange protocol
    requester: PrincipalId
    patient: PrincipalId
    category: Category

    def encode(self, w: Writer) -> None:
        w.raw(self.request_tx, 32)
        write_principal(w, self.requester)
        write_principal(w, self.patient)
        _write_category(w, self.category)

    @staticmethod
    def decode(r: Reader) -> "EmergencyAccess":
        return EmergencyAccess(
            r.raw(32), read_principal(r), read_principal(r), _read_category(r)
        )

    def audit_subject(self) -> str:
        return self.patient.id

    def audit_detail(self) -> dict:
        return {
            "request_tx": self.request_tx.hex(),
            "requester": self.requester.id,
            "category": self.category.value,
            "emergency": True,
            "flagged_for_review": True,
        }


@dataclass(frozen=True)
class RegisterStudy:
    TAG = 8
    ACTION = "RegisterStudy"
    study_id: str
    quiz_hash: bytes
    researchers: tuple[PrincipalId, ...]
    question_count: int

    def encode(self, w: Writer) -> None:
        w.string(self.study_id, bound=ID_BOUND)
        w.raw(self.quiz_hash, 32)
        w.u32(len(self.researchers))
        for p in self.researchers:
            write_principal(w, p)
        w.u32(self.question_count)

    @staticmethod
    def decode(r: Reader) -> "RegisterStudy":
        study_id = r.string(bound=ID_BOUND)
        quiz_hash = r.raw(32)
        researchers = tuple(read_principal(r) for _ in range(r.u32()))
        return RegisterStudy(study_id, quiz_hash, researchers, r.u32())

    def audit_subject(self) -> str:
        return ""

    def audit_detail(self) -> dict:
        return {
            "study": self.study_id,
            "quiz_hash": self.quiz_hash.hex(),
            "researchers": [p.id for p in self.researchers],
            "questions": self.question_count,
        }


@dataclass(frozen=True)
class ConsentInvited:
    TAG = 9
    ACTION = "ConsentInvited"
    study_id: str
    participant: PrincipalId

    def encode(self, w: Writer) -> None:
        w.string(self.study_id, bound=ID_BOUND)
        write_principal(w, self.participant)

    @staticmethod
    def decode(r: Reader) -> "ConsentInvited":
        return ConsentInvited(r.string(bound=ID_BOUND), read_principal(r))

    def audit_subject(self) -> str:
        return self.participant.id

    def audit_detail(self) -> dict:
        return {"study": self.study_id}


@dataclass(frozen=True)
class QuizAttemptRecorded:
    TAG = 10
    ACTION = "QuizAttemptRecorded"
    study_id: str
    participant: PrincipalId
    ordinal: int
    mistakes: int
    passed: bool

    def encode(self, w: Writer) -> None:
        w.string(self.study_id, bound=ID_BOUND)
        write_principal(w, self.participant)
        w.u32(self.ordinal)
        w.u32(self.mistakes)
        w.boolean(self.passed)

    @staticmethod
    def decode(r: Reader) -> "QuizAttemptRecorded":
        return QuizAttemptRecorded(
            r.string(bound=ID_BOUND),
            read_principal(r),
            r.u32(),
            r.u32(),
            r.boolean(),
        )

    def audit_subject(self) -> str:
        return self.participant.id

    def audit_detail(self) -> dict:
        return {
            "study": self.study_id,
            "attempt": self.ordinal,
            "mistakes": self.mistakes,
            "passed": self.passed,
        }


@dataclass(frozen=True)
class ConsentSigned:
    TAG = 11
    ACTION = "ConsentSigned"
    study_id: str
    participant: PrincipalId
    quiz_hash: bytes
    passing_attempt_tx: bytes
    consent_signature: bytes  # participant key over study_id || quiz_hash || attempt tx

    def encode(self, w: Writer) -> None:
        w.string(self.study_id, bound=ID_BOUND)
        write_principal(w, self.participant)
        w.raw(self.quiz_hash, 32)
        w.raw(self.passing_attempt_tx, 32)
        w.raw(self.consent_signature, crypto.SIGNATURE_LEN)

    @staticmethod
    def decode(r: Reader) -> "ConsentSigned":
        return ConsentSigned(
            r.string(bound=ID_BOUND),
            read_principal(r),
            r.raw(32),
            r.raw(32),
            r.raw(crypto.SIGNATURE_LEN),
        )

    def audit_subject(self) -> str:
        return self.participant.id

    def audit_detail(self) -> dict:
        return {
            "study": self.study_id,
            "quiz_hash": self.quiz_hash.hex(),
            "attempt_tx": self.passing_attempt_tx.hex(),
        }


@dataclass(frozen=True)
class ConsentWithdrawn:
    TAG = 12
    ACTION = "ConsentWithdrawn"
    study_id: str
    participant: PrincipalId

    def encode(self, w: Writer) -> None:
        w.string(self.study_id, bound=ID_BOUND)
        write_principal(w, self.participant)

    @staticmethod
    def decode(r: Reader) -> "ConsentWithdrawn":
        return ConsentWithdrawn(r.string(bound=ID_BOUND), read_principal(r))

    def audit_subject(self) -> str:
        return self.participant.id

    def audit_detail(self) -> dict:
        return {"study": self.study_id}


@dataclass(frozen=True)
class ProfilePublished:
    TAG = 13
    ACTION = "ProfilePublished"
    participant: PrincipalId
    commitments: frozenset[bytes]
    discoverable: bool
    study_overrides: frozenset[tuple[str, bool]]

    def encode(self, w: Writer) -> None:
        write_principal(w, self.participant)
        commits = sorted(self.commitments)
        w.u32(len(commits))
        for c in commits:
            w.raw(c, 32)
        w.boolean(self.discoverable)
        overrides = sorted(self.study_overrides)
        w.u32(len(overrides))
        for study_id, flag in overrides:
            w.string(study_id, bound=ID_BOUND)
            w.boolean(flag)

    @staticmethod
    def decode(r: Reader) -> "ProfilePublished":
        participant = read_principal(r)
        commits = frozenset(r.raw(32) for _ in range(r.u32()))
        discoverable = r.boolean()
        overrides = frozenset(
            (r.string(bound=ID_BOUND), r.boolean()) for _ in range(r.u32())
        )
        return ProfilePublished(participant, commits, discoverable, overrides)

    def audit_subject(self) -> str:
        return self.participant.id

    def audit_detail(self) -> dict:
        return {
            "commitments": sorted(c.hex() for c in self.commitments),
            "discoverable": self.discoverable,
            "overrides": {k: v for k, v in sorted(self.study_overrides)},
        }


Payload = Union[
    RegisterPrincipal,
    CreatePlan,
    GrantAccess,
    RevokeAccess,
    DataRequestRecorded,
    AccessCompleted,
    EmergencyAccess,
    RegisterStudy,
    ConsentInvited,
    QuizAttemptRecorded,
    ConsentSigned,
    ConsentWithdrawn,
    ProfilePublished,
]

_PAYLOAD_TYPES = {
    cls.TAG: cls
    for cls in (
        RegisterPrincipal,
        CreatePlan,
        GrantAccess,
        RevokeAccess,
        DataRequestRecorded,
        AccessCompleted,
        EmergencyAccess,
        RegisterStudy,
        ConsentInvited,
        QuizAttemptRecorded,
        ConsentSigned,
        ConsentWithdrawn,
        ProfilePublished,
    )
}

ACTIONS = tuple(cls.ACTION for cls in _PAYLOAD_TYPES.values())


# ---------------------------------------------------------------------------
# Transactions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transaction:
    timestamp: int
    author: PrincipalId
    author_org: PrincipalId
    payload: Payload
    signature: Optional[bytes] = None

    @cached_property
    def tx_id(self) -> bytes:
        return tx_hash(self)

    @property
    def action(self) -> str:
        return self.payload.ACTION


def canonical_encode(tx: Transaction) -> bytes:
    """Signature-less wire form: timestamp, author, author org, payload tag, payload."""
    w = Writer()
    w.u64(tx.timestamp)
    write_principal(w, tx.author)
    write_principal(w, tx.author_org)
    w.u8(tx.payload.TAG)
    tx.payload.encode(w)
    return w.getvalue()


def read_transaction(r: Reader, signature: Optional[bytes] = None) -> Transaction:
    """Parse one transaction in-stream; the encoding is self-delimiting."""
    timestamp = r.u64()
    author = read_principal(r)
    author_org = read_principal(r)
    tag = r.u8()
    cls = _PAYLOAD_TYPES.get(tag)
    if cls is None:
        raise EncodingError(f"unknown payload tag {tag}")
    payload = cls.decode(r)
    return Transaction(timestamp, author, author_org, payload, signature)


def decode_transaction(data: bytes, signature: Optional[bytes] = None) -> Transaction:
    r = Reader(data)
    tx = read_transaction(r, signature)
    r.expect_end()
    return tx


def tx_hash(tx: Transaction) -> bytes:
    return crypto.sha256(canonical_encode(tx))


def sign_tx(tx: Transaction, private_key: bytes) -> Transaction:
    sig = crypto.sign(private_key, tx.tx_id)
    return Transaction(tx.timestamp, tx.author, tx.author_org, tx.payload, sig)


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    reason: str  # ok | unknown_author | missing_signature | bad_signature

    def __bool__(self) -> bool:
        return self.ok


def verify_tx(tx: Transaction, registry: dict[PrincipalId, bytes]) -> VerifyResult:
    """Check the envelope signature against the author's registered key.

    A RegisterPrincipal self-certifies: when the author is the subject being
    registered and no key is on file yet, the payload's key is used. That is
    what bootstraps genesis.
    """
    if tx.signature is None:
        return VerifyResult(False, "missing_signature")
    key = registry.get(tx.author)
    if key is None:
        p = tx.payload
        if isinstance(p, RegisterPrincipal) and p.subject == tx.author:
            key = p.public_key
        else:
            return VerifyResult(False, "unknown_author")
    if crypto.verify(key, tx.signature, tx.tx_id):
        return VerifyResult(True, "ok")
    return VerifyResult(False, "bad_signature")


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp: int
    proposer: PrincipalId
    tx_root: bytes
    transactions: tuple[Transaction, ...]
    endorsements: tuple[tuple[PrincipalId, bytes], ...] = ()

    @cached_property
    def hash(self) -> bytes:
        return block_hash(self)


def compute_tx_root(transactions: Iterable[Transaction]) -> bytes:
    return crypto.sha256(b"".join(tx.tx_id for tx in transactions))


def header_bytes(block: Block) -> bytes:
    w = Writer()
    w.u64(block.height)
    w.raw(block.prev_hash, 32)
    w.u64(block.timestamp)
    write_principal(w, block.proposer)
    w.raw(block.tx_root, 32)
    return w.getvalue()


def block_hash(block: Block) -> bytes:
    """Header digest; endorsements are excluded so all endorsers co-sign it."""
    return crypto.sha256(header_bytes(block))


def build_block(
    pending: list[Transaction],
    prev: Block,
    proposer: PrincipalId,
    timestamp: int,
    registry: dict[PrincipalId, bytes],
) -> Block:
    if not pending:
        raise ChainError("cannot build an empty block")
    reg = dict(registry)
    for tx in pending:
        result = verify_tx(tx, reg)
        if not result:
            raise ChainError(
                f"invalid transaction {tx.tx_id.hex()} in pending set: {result.reason}"
            )
        if isinstance(tx.payload, RegisterPrincipal):
            reg.setdefault(tx.payload.subject, tx.payload.public_key)
    txs = tuple(pending)
    return Block(
        height=prev.height + 1,
        prev_hash=prev.hash,
        timestamp=timestamp,
        proposer=proposer,
        tx_root=compute_tx_root(txs),
        transactions=txs,
    )


def endorse_block(block: Block, private_key: bytes) -> bytes:
    return crypto.sign(private_key, block.hash)


def quorum(org_count: int) -> int:
    """Endorsements required to commit with `org_count` member organizations."""
    return (2 * org_count) // 3 + 1


# ---------------------------------------------------------------------------
# Chain state and validation
# ---------------------------------------------------------------------------


@dataclass
class LedgerState:
    blocks: list[Block] = field(default_factory=list)
    height_index: dict[bytes, tuple[int, int]] = field(default_factory=dict)

    def append(self, block: Block) -> None:
        if block.height != len(self.blocks):
            raise ChainError(
                f"append out of order: block height {block.height}, chain tip {len(self.blocks) - 1}"
            )
        self.blocks.append(block)
        for pos, tx in enumerate(block.transactions):
            self.height_index[tx.tx_id] = (block.height, pos)

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    def tip(self) -> Block:
        if not self.blocks:
            raise ChainError("empty chain")
        return self.blocks[-1]

    def find_tx(self, tx_id: bytes) -> Optional[Transaction]:
        loc = self.height_index.get(tx_id)
        if loc is None:
            return None
        height, pos = loc
        return self.blocks[height].transactions[pos]

    def transactions(self) -> Iterator[tuple[int, int, Transaction]]:
        for block in self.blocks:
            for pos, tx in enumerate(block.transactions):
                yield block.height, pos, tx


@dataclass(frozen=True)
class Violation:
    height: int
    rule: str
    message: str

    def __str__(self) -> str:
        return f"height {self.height}: {self.rule}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violation: Optional[Violation] = None

    def __bool__(self) -> bool:
        return self.ok


def _registered_orgs_and_keys(
    blocks: list[Block], upto: int
) -> tuple[list[PrincipalId], dict[PrincipalId, bytes]]:
    orgs: list[PrincipalId] = []
    registry: dict[PrincipalId, bytes] = {}
    for block in blocks[:upto]:
        for tx in block.transactions:
            p = tx.payload
            if isinstance(p, RegisterPrincipal) and p.subject not in registry:
                registry[p.subject] = p.public_key
                if p.subject.kind is Kind.ORGANIZATION:
                    orgs.append(p.subject)
    return orgs, registry


def validate_chain(
    ledger: LedgerState,
    trusted_keys: Optional[dict[PrincipalId, bytes]] = None,
) -> ValidationReport:
    """Walk the chain from genesis; stop at the first broken rule.

    Membership and keys are folded from the chain itself: an organization
    registered at height h counts toward the quorum denominator from height
    h+1. Genesis is measured against its own registrations. Every listed
    endorsement must verify; a single bad one is a violation even when the
    quorum margin would absorb it.
    """
    registry: dict[PrincipalId, bytes] = dict(trusted_keys or {})
    member_orgs: list[PrincipalId] = []

    def fail(height: int, rule: str, message: str) -> ValidationReport:
        return ValidationReport(False, Violation(height, rule, message))

    for i, block in enumerate(ledger.blocks):
        if block.height != i:
            return fail(i, "height", f"expected height {i}, block says {block.height}")
        if i == 0:
            if block.prev_hash != ZERO_HASH:
                return fail(0, "prev_hash", "genesis prev_hash must be 32 zero bytes")
        else:
            if block.prev_hash != ledger.blocks[i - 1].hash:
                return fail(i, "prev_hash", "does not match hash of previous block")
        if block.tx_root != compute_tx_root(block.transactions):
            return fail(i, "tx_root", "root does not recompute from transactions")
        if not block.transactions:
            return fail(i, "empty_block", "block carries no transactions")

        block_registry = dict(registry)
        for pos, tx in enumerate(block.transactions):
            result = verify_tx(tx, block_registry)
            if not result:
                return fail(
                    i, "tx_signature", f"tx #{pos} ({tx.tx_id.hex()[:16]}): {result.reason}"
                )
            p = tx.payload
            if isinstance(p, RegisterPrincipal) and p.subject not in block_registry:
                block_registry[p.subject] = p.public_key

        # Membership in force: orgs registered strictly before this height,
        # except genesis which is measured against its own registrations.
        if i == 0:
            eligible = []
            for tx in block.transactions:
                p = tx.payload
                if (
                    isinstance(p, RegisterPrincipal)
                    and p.subject.kind is Kind.ORGANIZATION
                    and p.subject not in eligible
                ):
                    eligible.append(p.subject)
            endorse_registry = block_registry
        else:
            eligible = list(member_orgs)
            endorse_registry = registry
        needed = quorum(len(eligible))
        if block.proposer not in eligible:
            return fail(i, "proposer", f"{block.proposer} not a member organization")
        seen: set[PrincipalId] = set()
        digest = block.hash
        for org, sig in block.endorsements:
            if org not in eligible:
                return fail(i, "endorsement", f"{org} not a member organization")
            if org in seen:
                return fail(i, "endorsement", f"duplicate endorsement from {org}")
            seen.add(org)
            key = endorse_registry.get(org)
            if key is None or not crypto.verify(key, sig, digest):
                return fail(i, "endorsement", f"signature from {org} does not verify")
        if len(seen) < needed:
            return fail(
                i,
                "quorum",
                f"{len(seen)} endorsements, quorum is {needed} of {len(eligible)}",
            )

        registry = block_registry
        for tx in block.transactions:
            p = tx.payload
            if (
                isinstance(p, RegisterPrincipal)
                and p.subject.kind is Kind.ORGANIZATION
                and p.subject not in member_orgs
            ):
                member_orgs.append(p.subject)

    return ValidationReport(True)


# ---------------------------------------------------------------------------
# Audit queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditEntry:
    tx_id: bytes
    height: int
    position: int
    timestamp: int
    actor: PrincipalId
    actor_org: PrincipalId
    action: str
    subject: str
    detail: dict

    def to_json(self) -> str:
        row = {
            "tx_id": self.tx_id.hex(),
            "height": self.height,
            "timestamp": self.timestamp,
            "actor": str(self.actor),
            "actor_org": self.actor_org.id,
            "action": self.action,
            "subject": self.subject,
            "detail": self.detail,
        }
        return json.dumps(row, sort_keys=True, separators=(",", ":"))


def audit_entries(ledger: LedgerState) -> Iterator[AuditEntry]:
    for height, pos, tx in ledger.transactions():
        yield AuditEntry(
            tx_id=tx.tx_id,
            height=height,
            position=pos,
            timestamp=tx.timestamp,
            actor=tx.author,
            actor_org=tx.author_org,
            action=tx.action,
            subject=tx.payload.audit_subject(),
            detail=tx.payload.audit_detail(),
        )


def query_audit(
    ledger: LedgerState,
    subject: Optional[str] = None,
    actor: Optional[str] = None,
    action: Optional[str] = None,
    time_from: Optional[int] = None,
    time_to: Optional[int] = None,
) -> list[AuditEntry]:
    """Filtered audit entries in (height, intra-block position) order.

    The time range is inclusive on both ends. An empty filter returns one
    entry per committed transaction.
    """
    if time_from is not None and time_to is not None and time_to < time_from:
        raise ValueError(f"time range end {time_to} before start {time_from}")
    out = []
    for entry in audit_entries(ledger):
        if subject is not None and entry.subject != subject:
            continue
        if actor is not None and entry.actor.id != actor:
            continue
        if action is not None and entry.action != action:
            continue
        if time_from is not None and entry.timestamp < time_from:
            continue
        if time_to is not None and entry.timestamp > time_to:
            continue
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# Persistence: length-prefixed block records
# ---------------------------------------------------------------------------


def _encode_block_record(block: Block) -> bytes:
    """Record layout: 8-byte BE record length, header encoding, 4-byte BE tx
    count, per tx the canonical encoding immediately followed by its 64-byte
    signature, then 4-byte BE endorsement count and (principal encoding +
    64-byte signature) pairs. Transactions carry no length prefix; their
    encoding is self-delimiting."""
    w = Writer()
    body = bytearray()
    body += header_bytes(block)
    body += len(block.transactions).to_bytes(4, "big")
    for tx in block.transactions:
        if tx.signature is None:
            raise ChainError("cannot persist an unsigned transaction")
        body += canonical_encode(tx)
        body += tx.signature
    body += len(block.endorsements).to_bytes(4, "big")
    for org, sig in block.endorsements:
        pw = Writer()
        write_principal(pw, org)
        body += pw.getvalue()
        body += sig
    w.u64(len(body))
    return w.getvalue() + bytes(body)


def write_ledger(ledger: LedgerState, path: str) -> None:
    with open(path, "wb") as fh:
        for block in ledger.blocks:
            fh.write(_encode_block_record(block))


def _decode_block_record(r: Reader) -> Block:
    height = r.u64()
    prev_hash = r.raw(32)
    timestamp = r.u64()
    proposer = read_principal(r)
    tx_root = r.raw(32)
    txs = []
    for _ in range(r.u32()):
        tx = read_transaction(r)
        sig = r.raw(crypto.SIGNATURE_LEN)
        txs.append(
            Transaction(tx.timestamp, tx.author, tx.author_org, tx.payload, sig)
        )
    endorsements = []
    for _ in range(r.u32()):
        org = read_principal(r)
        sig = r.raw(crypto.SIGNATURE_LEN)
        endorsements.append((org, sig))
    return Block(
        height=height,
        prev_hash=prev_hash,
        timestamp=timestamp,
        proposer=proposer,
        tx_root=tx_root,
        transactions=tuple(txs),
        endorsements=tuple(endorsements),
    )


def read_ledger(path: str) -> LedgerState:
    with open(path, "rb") as fh:
        data = fh.read()
    ledger = LedgerState()
    pos = 0
    height = 0
    while pos < len(data):
        if pos + 8 > len(data):
            raise ChainError("truncated record length")
        rec_len = int.from_bytes(data[pos : pos + 8], "big")
        pos += 8
        if pos + rec_len > len(data):
            raise ChainError("truncated block record")
        r = Reader(data[pos : pos + rec_len])
        try:
            block = _decode_block_record(r)
            r.expect_end()
        except EncodingError as exc:
            raise ChainError(f"unreadable block record at height {height}: {exc}") from exc
        pos += rec_len
        if block.height != height:
            raise ChainError(f"record {height} carries height {block.height}")
        ledger.append(block)
        height += 1
    if not ledger.blocks:
        raise ChainError("ledger file holds no blocks")
    return ledger
