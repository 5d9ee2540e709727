"""Research-consent lifecycle: studies, quiz grading, signing, withdrawal,
dashboards, and commitment-based participant matching.

On-chain state carries study registrations (quiz hash only), invitations,
attempt counts with mistake totals, signatures, withdrawals, and profile
commitments. Quiz content, per-question struggle detail, and descriptor
salts stay on the participant's host node and are shared only under the
participant's layer policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import crypto
from .codec import Writer
from .errors import ConsentError
from .ledger import (
    ConsentInvited,
    ConsentSigned,
    ConsentWithdrawn,
    Kind,
    PrincipalId,
    ProfilePublished,
    QuizAttemptRecorded,
    RegisterStudy,
    Transaction,
)

PASS_MISTAKE_LIMIT = 0  # passing means zero mistakes on a single attempt


@dataclass(frozen=True)
class Question:
    prompt: str
    choices: tuple[str, ...]
    correct: int


@dataclass(frozen=True)
class Quiz:
    questions: tuple[Question, ...]

    def __post_init__(self) -> None:
        if not self.questions:
            raise ConsentError("a quiz needs at least one question")
        for i, q in enumerate(self.questions):
            if not 2 <= len(q.choices) <= 6:
                raise ConsentError(f"question {i} needs 2-6 choices")
            if not 0 <= q.correct < len(q.choices):
                raise ConsentError(f"question {i} correct index out of range")

    def grade(self, answers: list[int]) -> tuple[int, bool]:
        """Count of wrong answers and whether the attempt passes."""
        if len(answers) != len(self.questions):
            raise ConsentError(
                f"answer count {len(answers)} does not match {len(self.questions)} questions"
            )
        mistakes = sum(1 for a, q in zip(answers, self.questions) if a != q.correct)
        return mistakes, mistakes <= PASS_MISTAKE_LIMIT

    def wrong_indexes(self, answers: list[int]) -> list[int]:
        return [i for i, (a, q) in enumerate(zip(answers, self.questions)) if a != q.correct]


def quiz_hash(quiz: Quiz) -> bytes:
    w = Writer()
    w.u32(len(quiz.questions))
    for q in quiz.questions:
        w.string(q.prompt)
        w.u32(len(q.choices))
        for c in q.choices:
            w.string(c)
        w.u32(q.correct)
    return crypto.sha256(w.getvalue())


def parse_quiz(lines: Iterable[str]) -> Quiz:
    """Fixture format: a `Q <prompt>` line, `C <choice>` lines, then `A <index>`."""
    questions: list[Question] = []
    prompt: Optional[str] = None
    choices: list[str] = []
    correct: Optional[int] = None

    def flush() -> None:
        nonlocal prompt, choices, correct
        if prompt is None:
            return
        if correct is None:
            raise ConsentError(f"question {prompt!r} has no answer line")
        questions.append(Question(prompt, tuple(choices), correct))
        prompt, choices, correct = None, [], None

    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, _, rest = line.partition(" ")
        if tag == "Q":
            flush()
            prompt = rest.strip()
        elif tag == "C":
            if prompt is None:
                raise ConsentError("choice line before any question")
            choices.append(rest.strip())
        elif tag == "A":
            if prompt is None:
                raise ConsentError("answer line before any question")
            try:
                correct = int(rest.strip())
            except ValueError:
                raise ConsentError(f"answer index must be an integer: {rest.strip()!r}") from None
        else:
            raise ConsentError(f"unknown quiz line tag {tag!r}")
    flush()
    return Quiz(tuple(questions))


# ---------------------------------------------------------------------------
# On-chain fold
# ---------------------------------------------------------------------------

STATES = ("invited", "attempted", "passed", "signed", "withdrawn")


@dataclass
class AttemptRecord:
    ordinal: int
    mistakes: int
    at: int
    tx_id: bytes
    passed: bool


@dataclass
class LifecycleRecord:
    study_id: str
    participant: PrincipalId
    state: str = "invited"
    attempts: list[AttemptRecord] = field(default_factory=list)
    passing_tx: Optional[bytes] = None
    signed_at: Optional[int] = None
    withdrawn_at: Optional[int] = None


@dataclass
class StudyRecord:
    study_id: str
    quiz_hash: bytes
    researchers: tuple[PrincipalId, ...]
    question_count: int


@dataclass
class ProfileRecord:
    participant: PrincipalId
    commitments: frozenset[bytes]
    discoverable: bool
    study_overrides: dict[str, bool]

    def effective_discoverable(self, study_id: Optional[str]) -> bool:
        if study_id is not None and study_id in self.study_overrides:
            return self.study_overrides[study_id]
        return self.discoverable


@dataclass
class ConsentState:
    """Fold of study, invitation, attempt, signature, withdrawal, and profile txs."""

    studies: dict[str, StudyRecord] = field(default_factory=dict)
    lifecycles: dict[tuple[str, str], LifecycleRecord] = field(default_factory=dict)
    profiles: dict[str, ProfileRecord] = field(default_factory=dict)

    def apply(self, tx: Transaction, height: int, position: int) -> None:
        p = tx.payload
        if isinstance(p, RegisterStudy):
            if p.study_id in self.studies:
                raise ConsentError(f"duplicate study {p.study_id}")
            self.studies[p.study_id] = StudyRecord(
                p.study_id, p.quiz_hash, p.researchers, p.question_count
            )
        elif isinstance(p, ConsentInvited):
            key = (p.study_id, p.participant.id)
            if key in self.lifecycles:
                raise ConsentError(f"{p.participant.id} already invited to {p.study_id}")
            self.lifecycles[key] = LifecycleRecord(p.study_id, p.participant)
        elif isinstance(p, QuizAttemptRecorded):
            rec = self._lifecycle(p.study_id, p.participant.id)
            rec.attempts.append(
                AttemptRecord(p.ordinal, p.mistakes, tx.timestamp, tx.tx_id, p.passed)
            )
            if p.passed:
                rec.passing_tx = rec.passing_tx or tx.tx_id
                rec.state = "passed"
            elif rec.state == "invited":
                rec.state = "attempted"
        elif isinstance(p, ConsentSigned):
            rec = self._lifecycle(p.study_id, p.participant.id)
            rec.state = "signed"
            rec.signed_at = tx.timestamp
        elif isinstance(p, ConsentWithdrawn):
            rec = self._lifecycle(p.study_id, p.participant.id)
            rec.state = "withdrawn"
            rec.withdrawn_at = tx.timestamp
        elif isinstance(p, ProfilePublished):
            # Republishing replaces the profile: layer policy must be adjustable.
            self.profiles[p.participant.id] = ProfileRecord(
                p.participant,
                p.commitments,
                p.discoverable,
                {k: v for k, v in p.study_overrides},
            )

    def _lifecycle(self, study_id: str, participant_id: str) -> LifecycleRecord:
        rec = self.lifecycles.get((study_id, participant_id))
        if rec is None:
            raise ConsentError(f"no consent lifecycle for {participant_id} in {study_id}")
        return rec

    def consent_valid(self, study_id: str, participant_id: str) -> bool:
        rec = self.lifecycles.get((study_id, participant_id))
        return rec is not None and rec.state == "signed"


# ---------------------------------------------------------------------------
# Operation builders
# ---------------------------------------------------------------------------


def make_study_registration(
    state: ConsentState,
    researchers: tuple[PrincipalId, ...],
    study_id: str,
    quiz: Quiz,
) -> RegisterStudy:
    if study_id in state.studies:
        raise ConsentError(f"duplicate study {study_id}")
    if not researchers:
        raise ConsentError("a study needs at least one researcher")
    for r in researchers:
        if r.kind is not Kind.RESEARCHER:
            raise ConsentError(f"{r.id} is not a researcher")
    return RegisterStudy(study_id, quiz_hash(quiz), researchers, len(quiz.questions))


def make_invitation(
    state: ConsentState, researcher: PrincipalId, study_id: str, participant: PrincipalId
) -> ConsentInvited:
    study = state.studies.get(study_id)
    if study is None:
        raise ConsentError(f"unknown study {study_id}")
    if researcher not in study.researchers:
        raise ConsentError(f"{researcher.id} is not a researcher of {study_id}")
    if (study_id, participant.id) in state.lifecycles:
        raise ConsentError(f"{participant.id} already invited to {study_id}")
    return ConsentInvited(study_id, participant)


def make_attempt(
    state: ConsentState,
    participant: PrincipalId,
    study_id: str,
    quiz: Quiz,
    answers: list[int],
) -> tuple[QuizAttemptRecorded, list[int]]:
    """Grade locally; only the mistake count and ordinal go on chain.

    Returns the payload and the wrong-question indexes, which stay on the
    participant's host node. Attempts are legal while not signed or
    withdrawn; a pass is sticky, so retrying after a pass cannot demote it.
    """
    rec = state.lifecycles.get((study_id, participant.id))
    if rec is None:
        raise ConsentError(f"{participant.id} was not invited to {study_id}")
    if rec.state in ("signed", "withdrawn"):
        raise ConsentError(f"consent already {rec.state}; no further attempts")
    mistakes, passed = quiz.grade(answers)
    ordinal = len(rec.attempts) + 1
    payload = QuizAttemptRecorded(study_id, participant, ordinal, mistakes, passed)
    return payload, quiz.wrong_indexes(answers)


def consent_message(study_id: str, quiz_digest: bytes, attempt_tx: bytes) -> bytes:
    """Exact bytes a participant signs when consenting."""
    w = Writer()
    w.string(study_id)
    w.raw(quiz_digest, 32)
    w.raw(attempt_tx, 32)
    return w.getvalue()


def make_signature(
    state: ConsentState,
    participant: PrincipalId,
    study_id: str,
    private_key: bytes,
) -> ConsentSigned:
    rec = state.lifecycles.get((study_id, participant.id))
    if rec is None:
        raise ConsentError(f"{participant.id} was not invited to {study_id}")
    if rec.state == "signed":
        raise ConsentError("consent already signed")
    if rec.state != "passed" or rec.passing_tx is None:
        raise ConsentError("consent can be signed only after a zero-mistake attempt")
    study = state.studies[study_id]
    message = consent_message(study_id, study.quiz_hash, rec.passing_tx)
    signature = crypto.sign(private_key, message)
    return ConsentSigned(study_id, participant, study.quiz_hash, rec.passing_tx, signature)


def verify_consent_signature(
    payload: ConsentSigned, participant_key: bytes
) -> bool:
    message = consent_message(payload.study_id, payload.quiz_hash, payload.passing_attempt_tx)
    return crypto.verify(participant_key, payload.consent_signature, message)


def make_withdrawal(
    state: ConsentState, participant: PrincipalId, study_id: str
) -> ConsentWithdrawn:
    rec = state.lifecycles.get((study_id, participant.id))
    if rec is None:
        raise ConsentError(f"{participant.id} was not invited to {study_id}")
    if rec.state != "signed":
        raise ConsentError(f"cannot withdraw from state {rec.state!r}")
    return ConsentWithdrawn(study_id, participant)


def make_profile(
    participant: PrincipalId,
    descriptors: list[str],
    salts: dict[str, bytes],
    discoverable: bool,
    study_overrides: Optional[dict[str, bool]] = None,
) -> ProfilePublished:
    if not descriptors:
        raise ConsentError("a profile needs at least one source descriptor")
    commitments = frozenset(
        crypto.commitment(salts[d], d) for d in descriptors
    )
    overrides = frozenset((study_overrides or {}).items())
    return ProfilePublished(participant, commitments, discoverable, overrides)


# ---------------------------------------------------------------------------
# Dashboard
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DashboardRow:
    participant: str
    state: str
    attempts: int
    total_mistakes: int
    struggles: Optional[tuple[int, ...]]  # per-question wrong counts, None when private
    signed_at: Optional[int]


def consent_status(
    state: ConsentState,
    researcher: PrincipalId,
    study_id: str,
    struggle_detail: dict[str, list[list[int]]],
) -> list[DashboardRow]:
    """Per-participant dashboard for one study.

    Attempt and mistake totals fold over committed attempt transactions.
    `struggle_detail` maps participant id to per-attempt wrong-question
    indexes from the participants' host nodes; detail appears only when the
    participant's layer policy makes it discoverable for this study.
    """
    study = state.studies.get(study_id)
    if study is None:
        raise ConsentError(f"unknown study {study_id}")
    if researcher not in study.researchers:
        raise ConsentError(f"{researcher.id} is not a researcher of {study_id}")
    rows = []
    for (sid, participant_id), rec in sorted(state.lifecycles.items()):
        if sid != study_id:
            continue
        profile = state.profiles.get(participant_id)
        shared = profile is not None and profile.effective_discoverable(study_id)
        struggles: Optional[tuple[int, ...]] = None
        if shared:
            counts = [0] * study.question_count
            for wrong in struggle_detail.get(participant_id, []):
                for idx in wrong:
                    if 0 <= idx < study.question_count:
                        counts[idx] += 1
            struggles = tuple(counts)
        rows.append(
            DashboardRow(
                participant=participant_id,
                state=rec.state,
                attempts=len(rec.attempts),
                total_mistakes=sum(a.mistakes for a in rec.attempts),
                struggles=struggles,
                signed_at=rec.signed_at,
            )
        )
    return rows


DASHBOARD_HEADER = "participant\tstate\tattempts\tmistakes\tstruggles\tsigned_at"


def dashboard_rows(rows: Iterable[DashboardRow]) -> list[str]:
    out = [DASHBOARD_HEADER]
    for r in rows:
        struggles = ",".join(str(c) for c in r.struggles) if r.struggles is not None else "-"
        signed = str(r.signed_at) if r.signed_at is not None else "-"
        out.append(
            f"{r.participant}\t{r.state}\t{r.attempts}\t{r.total_mistakes}\t{struggles}\t{signed}"
        )
    return out


# ---------------------------------------------------------------------------
# Selective-disclosure matching
# ---------------------------------------------------------------------------


def verify_disclosure(profile: ProfileRecord, descriptor: str, salt: bytes) -> bool:
    """A revealed salt proves membership of exactly the queried descriptor."""
    return crypto.commitment(salt, descriptor) in profile.commitments
