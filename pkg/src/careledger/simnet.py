"""Deterministic in-process network of organization nodes.

One event loop owns everything: message deliveries with seeded latency,
endorsement rounds at block-interval boundaries, fault toggles, and session
expiry timers. The trace and every committed chain are pure functions of
(script, seed). Nodes hold only plain data (bytes keys, dataclasses, dicts),
so a whole simulation can be forked with deepcopy for prefix exploration.

Consensus is a minimal crash-fault round: the proposer for height h is the
h-th member organization round-robin (offline proposers are skipped), every
online member endorses the header digest, and the block commits once
floor(2n/3)+1 endorsements are collected. Rounds that cannot reach quorum
abort and leave their transactions pending; returning nodes replay missed
blocks from a peer before taking new messages.
"""

from __future__ import annotations

import copy
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Optional

from . import consent as consent_mod
from . import crypto
from . import policy as policy_mod
from .consent import ConsentState, Quiz
from .errors import ConsentError, PolicyError, SimError
from .exchange import OffChainStore, RequestOutcome, Session, VaultRow, build_timeline
from .ledger import (
    AccessCompleted,
    Block,
    Category,
    DataRequestRecorded,
    EmergencyAccess,
    Kind,
    LedgerState,
    PrincipalId,
    RegisterPrincipal,
    Transaction,
    ZERO_HASH,
    build_block,
    compute_tx_root,
    endorse_block,
    quorum,
    sign_tx,
    verify_tx,
)
from .policy import Decision, PolicyState, Verdict

# Synthetic true identities for patients and participants. These are the
# only "real" identifiers in the system; they live in org vaults, never on
# chain, and double as the privacy-scan dictionary.
SYNTHETIC_NAMES = (
    "Avery Quillfeather",
    "Benno Oostindier",
    "Carlien Vandermeulen",
    "Dorukhan Yilmazoglu",
    "Edita Kristapsone",
    "Fenna Wubbelina",
    "Gerlof Tjeerdsma",
    "Hanneke Vroomshoop",
    "Ilse Bruninkhuis",
    "Jorrit Klazenga",
    "Katarzyna Wlodarska",
    "Lubbert Heidenrijk",
    "Marijke Zuiderveld",
    "Nikolaas Wterberg",
    "Odile Franekers",
    "Pieterjan Slochteren",
    "Quirina Moddergat",
    "Roelof Bontebok",
    "Saskia Idskenhuizen",
    "Tjalling Eernewoude",
    "Ulbe Grootegast",
    "Veerle Scharnegoutum",
    "Wopke Tytsjerk",
    "Xandra Lutjebroek",
    "Ynskje Warfhuizen",
    "Zwaantje Kornhorn",
)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    latency_min: int = 10
    latency_max: int = 100
    block_interval: int = 1000
    session_ttl: int = 600_000

    def __post_init__(self) -> None:
        if self.latency_min > self.latency_max:
            raise SimError("latency range inverted")
        if self.block_interval <= 0:
            raise SimError("block interval must be positive")


@dataclass
class ScenarioEvent:
    seq: int
    at: int
    kind: str
    detail: dict

    def line(self) -> str:
        return "\t".join(
            (
                str(self.seq),
                str(self.at),
                self.kind,
                json.dumps(self.detail, sort_keys=True, separators=(",", ":")),
            )
        )


@dataclass
class Node:
    org: PrincipalId
    online: bool = True
    ledger: LedgerState = field(default_factory=LedgerState)
    policy: PolicyState = field(default_factory=PolicyState)
    consent: ConsentState = field(default_factory=ConsentState)
    store: OffChainStore = None  # type: ignore[assignment]
    sessions: dict[str, Session] = field(default_factory=dict)
    mempool: list[Transaction] = field(default_factory=list)
    mempool_ids: set[bytes] = field(default_factory=set)
    parked: list[tuple[str, dict]] = field(default_factory=list)
    deferred_requests: list[bytes] = field(default_factory=list)
    # Off-chain agent data for principals hosted at this node.
    struggles: dict[tuple[str, str], list[list[int]]] = field(default_factory=dict)
    profile_salts: dict[str, dict[str, bytes]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.store is None:
            self.store = OffChainStore(self.org.id)


@dataclass
class RoundState:
    round_id: int
    height: int
    proposer: str
    block: Block
    needed: int
    endorsements: dict[str, bytes] = field(default_factory=dict)
    committed: bool = False


@dataclass
class RequestState:
    request_tx: bytes
    requester: PrincipalId
    requester_org: str
    sender_org: str
    patient: PrincipalId
    category: Category
    emergency: bool
    stage: str = "submitted"  # submitted | notified | completed | delivered
    decision: Optional[Decision] = None
    session_org: Optional[str] = None
    session_id: Optional[str] = None


@dataclass
class MatchState:
    match_id: int
    researcher: PrincipalId
    descriptors: tuple[str, ...]
    study: Optional[str]
    outstanding: set[str] = field(default_factory=set)
    matched: set[str] = field(default_factory=set)
    done: bool = False


_TIMER_FNS = frozenset({"session_expiry"})


class Simulation:
    """Event-loop owner of all nodes. Single writer, deterministic."""

    def __init__(self, orgs: list[str], config: SimConfig):
        if not orgs:
            raise SimError("a network needs at least one organization")
        if len(set(orgs)) != len(orgs):
            raise SimError("duplicate organization ids")
        self.config = config
        self.clock = 0
        self.rng = random.Random(config.seed)
        self.trace: list[ScenarioEvent] = []
        self.nodes: dict[str, Node] = {}
        self.private_keys: dict[PrincipalId, bytes] = {}
        self.host_org: dict[str, str] = {}
        self.identity_rows: dict[str, VaultRow] = {}
        self.quizzes: dict[str, Quiz] = {}
        self.requests: dict[bytes, RequestState] = {}
        self.matches: dict[int, MatchState] = {}
        self.round: Optional[RoundState] = None
        self.last_committed: Optional[Block] = None
        self._queue: list[tuple[int, int, str, tuple]] = []
        self._eseq = 0
        self._seq = 0
        self._causal = 0
        self._attempt_scheduled = False
        self._round_ids = 0
        self._match_ids = 0
        self._grant_seq = 0
        self._identity_seq = 0
        self._spawn(orgs)

    # -- bootstrap ----------------------------------------------------------

    def _spawn(self, orgs: list[str]) -> None:
        registrations = []
        for name in orgs:
            principal = PrincipalId(Kind.ORGANIZATION, name)
            private, public = crypto.generate_keypair(self.rng)
            self.private_keys[principal] = private
            self.nodes[name] = Node(org=principal)
            tx = Transaction(
                timestamp=0,
                author=principal,
                author_org=principal,
                payload=RegisterPrincipal(principal, public),
            )
            registrations.append(sign_tx(tx, private))
        for tx in registrations:
            self._trace("tx_submitted", {"org": tx.author_org.id, "action": tx.action, "tx": tx.tx_id.hex()})
        txs = tuple(registrations)
        genesis = Block(
            height=0,
            prev_hash=ZERO_HASH,
            timestamp=0,
            proposer=PrincipalId(Kind.ORGANIZATION, orgs[0]),
            tx_root=compute_tx_root(txs),
            transactions=txs,
        )
        self._trace(
            "block_proposed",
            {"height": 0, "proposer": orgs[0], "txs": len(txs), "hash": genesis.hash.hex()},
        )
        endorsements = []
        for name in orgs:
            principal = PrincipalId(Kind.ORGANIZATION, name)
            endorsements.append((principal, endorse_block(genesis, self.private_keys[principal])))
            self._trace("block_endorsed", {"height": 0, "org": name})
        genesis = Block(
            height=0,
            prev_hash=ZERO_HASH,
            timestamp=0,
            proposer=genesis.proposer,
            tx_root=genesis.tx_root,
            transactions=txs,
            endorsements=tuple(sorted(endorsements, key=lambda e: e[0].id)),
        )
        for name in orgs:
            self._node_apply_block(self.nodes[name], genesis)

    # -- trace and event plumbing -------------------------------------------

    def _trace(self, kind: str, detail: dict) -> ScenarioEvent:
        event = ScenarioEvent(self._seq, self.clock, kind, detail)
        self._seq += 1
        self.trace.append(event)
        return event

    def _schedule(self, delay: int, fn: str, args: tuple) -> None:
        heapq.heappush(self._queue, (self.clock + delay, self._eseq, fn, args))
        self._eseq += 1
        if fn not in _TIMER_FNS:
            self._causal += 1

    def _pop_and_run(self) -> None:
        due, _, fn, args = heapq.heappop(self._queue)
        if fn not in _TIMER_FNS:
            self._causal -= 1
        self.clock = max(self.clock, due)
        getattr(self, "_ev_" + fn)(*args)

    def settle(self) -> None:
        """Run until only expiry timers remain. The clock follows the events."""
        while self._causal > 0:
            self._pop_and_run()

    def tick(self, ms: int) -> None:
        """Advance the clock by ms, firing everything due in the window."""
        if ms < 0:
            raise SimError("cannot tick backwards")
        target = self.clock + ms
        while self._queue and self._queue[0][0] <= target:
            self._pop_and_run()
        self.clock = target

    def fork(self) -> "Simulation":
        return copy.deepcopy(self)

    def _latency(self) -> int:
        return self.rng.randint(self.config.latency_min, self.config.latency_max)

    def _send(self, from_org: str, to_org: str, message: dict) -> None:
        detail = {"from": from_org, "to": to_org, "type": message["type"]}
        if message["type"] == "match_response":
            detail["disclosed"] = sorted(message["disclosures"])
            detail["refused"] = message.get("refused", False)
        self._trace("msg_sent", detail)
        self._schedule(self._latency(), "deliver", (from_org, to_org, message))

    # -- node state fold ------------------------------------------------------

    def _node_apply_block(self, node: Node, block: Block, sync: bool = False) -> None:
        node.ledger.append(block)
        for pos, tx in enumerate(block.transactions):
            node.policy.apply(tx, block.height, pos)
            node.consent.apply(tx, block.height, pos)
            if tx.tx_id in node.mempool_ids:
                node.mempool_ids.discard(tx.tx_id)
                node.mempool = [t for t in node.mempool if t.tx_id != tx.tx_id]
        detail = {"height": block.height, "org": node.org.id, "hash": block.hash.hex()}
        if sync:
            detail["sync"] = True
        self._trace("block_committed", detail)

    def _on_block_committed(self, node: Node, block: Block, sync: bool = False) -> None:
        self._node_apply_block(node, block, sync=sync)
        for tx in block.transactions:
            payload = tx.payload
            if (
                isinstance(payload, RegisterPrincipal)
                and payload.subject.kind is Kind.ORGANIZATION
                and payload.subject.id not in self.nodes
            ):
                self._provision_node(payload.subject, source=node)
            state = self.requests.get(tx.tx_id)
            if (
                state is not None
                and state.stage == "submitted"
                and node.org.id == state.requester_org
            ):
                state.stage = "notified"
                self._send(
                    state.requester_org,
                    state.sender_org,
                    {"type": "data_request", "request_tx_id": tx.tx_id},
                )
        if node.deferred_requests:
            pending, node.deferred_requests = node.deferred_requests, []
            for request_tx_id in pending:
                self._process_data_request(node, request_tx_id)
        self._maybe_schedule_attempt()

    def _provision_node(self, org: PrincipalId, source: Node) -> None:
        fresh = Node(org=org)
        for patient, row in self.identity_rows.items():
            fresh.store.vault[patient] = VaultRow(row.salt, row.true_id)
        self.nodes[org.id] = fresh
        for block in source.ledger.blocks:
            self._node_apply_block(fresh, block, sync=True)
        self._trace("node_up", {"org": org.id, "provisioned": True})

    # -- consensus ------------------------------------------------------------

    def _members_basis(self) -> Optional[Node]:
        best: Optional[Node] = None
        for name in self.nodes:
            node = self.nodes[name]
            if node.online and (best is None or node.ledger.height > best.ledger.height):
                best = node
        return best

    def _maybe_schedule_attempt(self) -> None:
        if self.round is not None or self._attempt_scheduled:
            return
        if not any(n.online and n.mempool for n in self.nodes.values()):
            return
        basis = self._members_basis()
        if basis is None:
            return
        members = basis.policy.quorum_members()
        online = [m for m in members if self.nodes[m.id].online]
        if len(online) < quorum(len(members)):
            return
        boundary = (self.clock // self.config.block_interval + 1) * self.config.block_interval
        self._schedule(boundary - self.clock, "consensus_attempt", ())
        self._attempt_scheduled = True

    def _ev_consensus_attempt(self) -> None:
        self._attempt_scheduled = False
        if self.round is not None:
            return
        basis = self._members_basis()
        if basis is None:
            return
        members = basis.policy.quorum_members()
        needed = quorum(len(members))
        online = [m for m in members if self.nodes[m.id].online]
        if len(online) < needed:
            return
        height = basis.ledger.height + 1
        proposer: Optional[Node] = None
        for k in range(len(members)):
            candidate = members[(height + k) % len(members)]
            if self.nodes[candidate.id].online:
                proposer = self.nodes[candidate.id]
                break
        if proposer is None:
            return
        if proposer.ledger.height != basis.ledger.height:
            # The proposer has not seen the newest commit yet (possible when
            # the block interval undercuts message latency). Proposing from a
            # stale tip could re-propose a committed height; wait for the
            # in-flight commit instead.
            self._maybe_schedule_attempt()
            return
        if not proposer.mempool:
            # Gossip may still be in flight toward the proposer; its arrival
            # will schedule the next attempt.
            self._maybe_schedule_attempt()
            return
        block = build_block(
            proposer.mempool,
            proposer.ledger.tip(),
            proposer.org,
            self.clock,
            proposer.policy.registry(),
        )
        self._round_ids += 1
        state = RoundState(
            round_id=self._round_ids,
            height=block.height,
            proposer=proposer.org.id,
            block=block,
            needed=needed,
        )
        self.round = state
        self._trace(
            "block_proposed",
            {
                "height": block.height,
                "proposer": proposer.org.id,
                "txs": len(block.transactions),
                "hash": block.hash.hex(),
            },
        )
        # The proposer endorses locally; the other online members by message.
        state.endorsements[proposer.org.id] = endorse_block(
            block, self.private_keys[proposer.org]
        )
        self._trace("block_endorsed", {"height": block.height, "org": proposer.org.id})
        proposer_sig = crypto.sign(self.private_keys[proposer.org], block.hash)
        for member in members:
            if member.id == proposer.org.id or not self.nodes[member.id].online:
                continue
            self._send(
                proposer.org.id,
                member.id,
                {
                    "type": "propose",
                    "round_id": state.round_id,
                    "block": block,
                    "proposer_sig": proposer_sig,
                },
            )
        # A round needs a propose + endorse round trip before it can commit;
        # the timeout must cover that even when the interval undercuts it.
        patience = max(self.config.block_interval, 3 * self.config.latency_max)
        self._schedule(patience, "round_timeout", (state.round_id,))
        self._check_round_commit()

    def _ev_round_timeout(self, round_id: int) -> None:
        if self.round is None or self.round.round_id != round_id or self.round.committed:
            return
        self.round = None
        self._maybe_schedule_attempt()

    def _check_round_commit(self) -> None:
        state = self.round
        if state is None or state.committed or len(state.endorsements) < state.needed:
            return
        state.committed = True
        endorsements = tuple(
            (PrincipalId(Kind.ORGANIZATION, org), sig)
            for org, sig in sorted(state.endorsements.items())
        )
        final = Block(
            height=state.block.height,
            prev_hash=state.block.prev_hash,
            timestamp=state.block.timestamp,
            proposer=state.block.proposer,
            tx_root=state.block.tx_root,
            transactions=state.block.transactions,
            endorsements=endorsements,
        )
        self.last_committed = final
        proposer = self.nodes[state.proposer]
        members = [m.id for m in proposer.policy.quorum_members()]
        self.round = None
        self._on_block_committed(proposer, final)
        for org_id in members:
            if org_id == state.proposer:
                continue
            node = self.nodes.get(org_id)
            if node is not None and node.online:
                self._send(
                    state.proposer,
                    org_id,
                    {"type": "commit", "round_id": state.round_id, "block": final},
                )

    def run_consensus_round(self) -> Optional[Block]:
        """Force an endorsement round now and settle; returns the committed block."""
        before = self.last_committed
        self._schedule(0, "consensus_attempt", ())
        self.settle()
        return self.last_committed if self.last_committed is not before else None

    # -- message handlers -------------------------------------------------------

    def _ev_deliver(self, from_org: str, to_org: str, message: dict) -> None:
        node = self.nodes[to_org]
        if not node.online:
            node.parked.append((from_org, message))
            return
        detail = {"from": from_org, "to": to_org, "type": message["type"]}
        if message["type"] == "match_response":
            detail["disclosed"] = sorted(message["disclosures"])
            detail["refused"] = message.get("refused", False)
        self._trace("msg_delivered", detail)
        handler = getattr(self, "_on_" + message["type"])
        handler(node, from_org, message)

    def _on_tx(self, node: Node, from_org: str, message: dict) -> None:
        tx: Transaction = message["tx"]
        if tx.tx_id in node.mempool_ids or tx.tx_id in node.ledger.height_index:
            return
        if not verify_tx(tx, node.policy.registry()):
            self._trace(
                "msg_delivered",
                {"to": node.org.id, "type": "tx", "dropped": "signature", "tx": tx.tx_id.hex()},
            )
            return
        node.mempool.append(tx)
        node.mempool_ids.add(tx.tx_id)
        self._maybe_schedule_attempt()

    def _on_propose(self, node: Node, from_org: str, message: dict) -> None:
        block: Block = message["block"]
        proposer_key = node.policy.registry().get(block.proposer)
        if proposer_key is None or not crypto.verify(
            proposer_key, message["proposer_sig"], block.hash
        ):
            self._trace(
                "msg_delivered",
                {"to": node.org.id, "type": "propose", "dropped": "signature"},
            )
            return
        if block.height != node.ledger.height + 1:
            return
        if block.prev_hash != node.ledger.tip().hash:
            return
        if block.tx_root != compute_tx_root(block.transactions):
            return
        registry = dict(node.policy.registry())
        for tx in block.transactions:
            if not verify_tx(tx, registry):
                return
            if isinstance(tx.payload, RegisterPrincipal):
                registry.setdefault(tx.payload.subject, tx.payload.public_key)
        self._trace("block_endorsed", {"height": block.height, "org": node.org.id})
        self._send(
            node.org.id,
            from_org,
            {
                "type": "endorse",
                "round_id": message["round_id"],
                "height": block.height,
                "block_hash": block.hash,
                "org": node.org,
                "sig": endorse_block(block, self.private_keys[node.org]),
            },
        )

    def _on_endorse(self, node: Node, from_org: str, message: dict) -> None:
        state = self.round
        if (
            state is None
            or state.round_id != message["round_id"]
            or state.proposer != node.org.id
            or state.committed
        ):
            return
        org: PrincipalId = message["org"]
        key = node.policy.registry().get(org)
        if key is None or not crypto.verify(key, message["sig"], state.block.hash):
            self._trace(
                "msg_delivered",
                {"to": node.org.id, "type": "endorse", "dropped": "signature"},
            )
            return
        if org.id not in {m.id for m in node.policy.quorum_members()}:
            return
        state.endorsements[org.id] = message["sig"]
        self._check_round_commit()

    def _on_commit(self, node: Node, from_org: str, message: dict) -> None:
        block: Block = message["block"]
        if block.height <= node.ledger.height:
            return
        if block.height != node.ledger.height + 1:
            # Commits can arrive out of order when latency exceeds the block
            # interval; pull the missing blocks from a peer instead of
            # dropping this one.
            self._sync_node(node)
            if block.height <= node.ledger.height:
                return
            if block.height != node.ledger.height + 1:
                return
        members = node.policy.quorum_members()
        needed = quorum(len(members))
        member_ids = {m.id for m in members}
        digest = block.hash
        seen = set()
        for org, sig in block.endorsements:
            key = node.policy.registry().get(org)
            if (
                org.id not in member_ids
                or org.id in seen
                or key is None
                or not crypto.verify(key, sig, digest)
            ):
                self._trace(
                    "msg_delivered",
                    {"to": node.org.id, "type": "commit", "dropped": "endorsement"},
                )
                return
            seen.add(org.id)
        if len(seen) < needed:
            self._trace(
                "msg_delivered",
                {"to": node.org.id, "type": "commit", "dropped": "quorum"},
            )
            return
        self._on_block_committed(node, block)

    # -- transaction submission ---------------------------------------------

    def _host_node(self, principal: PrincipalId) -> Node:
        org_id = self.host_org.get(principal.id)
        if org_id is None:
            raise PolicyError(f"unknown principal {principal}")
        return self.nodes[org_id]

    def _submit_tx(self, via: Node, tx: Transaction) -> Transaction:
        if not via.online:
            raise SimError(f"node {via.org.id} is offline; cannot submit")
        result = verify_tx(tx, via.policy.registry())
        if not result:
            raise SimError(f"refusing unverifiable transaction: {result.reason}")
        self._trace(
            "tx_submitted", {"org": via.org.id, "action": tx.action, "tx": tx.tx_id.hex()}
        )
        via.mempool.append(tx)
        via.mempool_ids.add(tx.tx_id)
        for name in self.nodes:
            if name != via.org.id:
                self._send(via.org.id, name, {"type": "tx", "tx": tx})
        self._maybe_schedule_attempt()
        return tx

    def _sign_and_submit(self, via: Node, author: PrincipalId, author_org: PrincipalId, payload) -> Transaction:
        tx = Transaction(self.clock, author, author_org, payload)
        return self._submit_tx(via, sign_tx(tx, self.private_keys[author]))

    def _entry_node(self) -> Node:
        for name in self.nodes:
            if self.nodes[name].online:
                return self.nodes[name]
        raise SimError("no online node to accept the submission")

    # -- registration operations ----------------------------------------------

    def register_organization(self, org_id: str) -> Transaction:
        via = self._entry_node()
        principal = PrincipalId(Kind.ORGANIZATION, org_id)
        private, public = crypto.generate_keypair(self.rng)
        payload = policy_mod.make_registration(via.policy, Kind.ORGANIZATION, org_id, public)
        self.private_keys[principal] = private
        return self._sign_and_submit(via, principal, principal, payload)

    def register_practitioner(self, practitioner_id: str, org_id: str) -> Transaction:
        org = PrincipalId(Kind.ORGANIZATION, org_id)
        node = self.nodes.get(org_id)
        if node is None:
            raise PolicyError(f"unknown organization {org_id}")
        principal = PrincipalId(Kind.PRACTITIONER, practitioner_id)
        private, public = crypto.generate_keypair(self.rng)
        payload = policy_mod.make_registration(
            node.policy, Kind.PRACTITIONER, practitioner_id, public, org_binding=org
        )
        self.private_keys[principal] = private
        self.host_org[practitioner_id] = org_id
        return self._sign_and_submit(node, principal, org, payload)

    def register_person(self, kind: Kind, person_id: str) -> Transaction:
        """Register a patient, researcher, or participant at the first org node."""
        via = self._entry_node()
        principal = PrincipalId(kind, person_id)
        private, public = crypto.generate_keypair(self.rng)
        commitment = None
        if kind in (Kind.PATIENT, Kind.PARTICIPANT):
            true_id = SYNTHETIC_NAMES[self._identity_seq % len(SYNTHETIC_NAMES)]
            if self._identity_seq >= len(SYNTHETIC_NAMES):
                true_id = f"{true_id} {self._identity_seq // len(SYNTHETIC_NAMES) + 1}"
            self._identity_seq += 1
            salt = crypto.new_salt(self.rng)
            commitment = crypto.commitment(salt, true_id)
            self.identity_rows[person_id] = VaultRow(salt, true_id)
            for node in self.nodes.values():
                node.store.vault[person_id] = VaultRow(salt, true_id)
        payload = policy_mod.make_registration(via.policy, kind, person_id, public, identity_commitment=commitment)
        self.private_keys[principal] = private
        self.host_org[person_id] = via.org.id
        return self._sign_and_submit(via, principal, via.org, payload)

    # -- care-plan operations --------------------------------------------------

    def create_plan(
        self,
        plan_id: str,
        patient_id: str,
        member_orgs: list[str],
        practitioners: list[tuple[str, str]],
    ) -> Transaction:
        patient = PrincipalId(Kind.PATIENT, patient_id)
        via = self._host_node(patient)
        payload = policy_mod.make_plan(
            via.policy,
            plan_id,
            patient,
            frozenset(PrincipalId(Kind.ORGANIZATION, o) for o in member_orgs),
            frozenset(
                (PrincipalId(Kind.PRACTITIONER, p), PrincipalId(Kind.ORGANIZATION, o))
                for p, o in practitioners
            ),
        )
        return self._sign_and_submit(via, patient, via.org, payload)

    def next_grant_id(self) -> str:
        self._grant_seq += 1
        return f"g{self._grant_seq:03d}"

    def grant_access(
        self,
        patient_id: str,
        plan_id: str,
        grantee_id: str,
        scope: frozenset[Category],
        valid_from: int,
        valid_until: int,
        grant_id: Optional[str] = None,
    ) -> tuple[str, Transaction]:
        patient = PrincipalId(Kind.PATIENT, patient_id)
        via = self._host_node(patient)
        gid = grant_id or self.next_grant_id()
        payload = policy_mod.make_grant(
            via.policy,
            gid,
            plan_id,
            patient,
            PrincipalId(Kind.PRACTITIONER, grantee_id),
            scope,
            valid_from,
            valid_until,
        )
        return gid, self._sign_and_submit(via, patient, via.org, payload)

    def revoke_access(self, patient_id: str, grant_id: str) -> Transaction:
        patient = PrincipalId(Kind.PATIENT, patient_id)
        via = self._host_node(patient)
        payload = policy_mod.make_revocation(via.policy, patient, grant_id)
        return self._sign_and_submit(via, patient, via.org, payload)

    # -- record exchange ---------------------------------------------------------

    def add_record(
        self, org_id: str, patient_id: str, category: Category, measured_at: int, value: str, author: str
    ) -> None:
        node = self.nodes.get(org_id)
        if node is None:
            raise SimError(f"unknown organization {org_id}")
        node.store.add_record(patient_id, category, measured_at, value, author)

    def start_request(
        self,
        requester: PrincipalId,
        requester_org: PrincipalId,
        sender_org: PrincipalId,
        patient: PrincipalId,
        category: Category,
        emergency: bool = False,
    ) -> bytes:
        if not isinstance(category, Category):
            raise SimError(f"malformed category {category!r}")
        node = self.nodes.get(requester_org.id)
        if node is None or not node.online:
            raise SimError(f"requester node {requester_org.id} is not available")
        if sender_org.id not in self.nodes:
            raise PolicyError(f"unknown sender organization {sender_org.id}")
        for principal in (requester, requester_org, sender_org, patient):
            if principal not in node.policy.principals:
                raise PolicyError(f"unknown principal {principal}")
        payload = DataRequestRecorded(
            requester, requester_org, sender_org, patient, category, emergency
        )
        tx = self._sign_and_submit(node, requester, requester_org, payload)
        self.requests[tx.tx_id] = RequestState(
            request_tx=tx.tx_id,
            requester=requester,
            requester_org=requester_org.id,
            sender_org=sender_org.id,
            patient=patient,
            category=category,
            emergency=emergency,
        )
        return tx.tx_id

    def _on_data_request(self, node: Node, from_org: str, message: dict) -> None:
        self._process_data_request(node, message["request_tx_id"])

    def _process_data_request(self, node: Node, request_tx_id: bytes) -> None:
        tx = node.ledger.find_tx(request_tx_id)
        if tx is None:
            node.deferred_requests.append(request_tx_id)
            return
        payload = tx.payload
        assert isinstance(payload, DataRequestRecorded)
        decision = policy_mod.evaluate_request(
            node.policy,
            payload.requester,
            payload.requester_org,
            payload.sender_org,
            payload.patient,
            payload.category,
            at=self.clock,
            emergency=payload.emergency,
        )
        state = self.requests.get(request_tx_id)
        if state is not None:
            state.decision = decision
            state.stage = "completed"
        detail = {
            "org": node.org.id,
            "request": request_tx_id.hex(),
            "verdict": decision.verdict.value,
            "reason": decision.reason.value,
            "emergency": payload.emergency,
        }
        if decision.grant_id is not None:
            detail["grant"] = decision.grant_id
        self._trace("decision", detail)

        if decision.verdict is Verdict.ALLOW_EMERGENCY:
            emergency_payload = EmergencyAccess(
                request_tx_id, payload.requester, payload.patient, payload.category
            )
            self._sign_and_submit(node, node.org, node.org, emergency_payload)
        records = []
        if decision.allowed:
            records = node.store.fetch(payload.patient.id, payload.category)
        completion = AccessCompleted(
            request_tx_id,
            payload.patient,
            decision.verdict.value,
            decision.reason.value,
            len(records),
        )
        self._sign_and_submit(node, node.org, node.org, completion)
        if decision.allowed:
            self._send(
                node.org.id,
                payload.requester_org.id,
                {
                    "type": "records",
                    "request_tx_id": request_tx_id,
                    "records": list(records),
                    "requester": payload.requester,
                },
            )
        else:
            self._send(
                node.org.id,
                payload.requester_org.id,
                {"type": "deny", "request_tx_id": request_tx_id},
            )

    def _on_records(self, node: Node, from_org: str, message: dict) -> None:
        request_tx_id: bytes = message["request_tx_id"]
        session_id = "s" + request_tx_id.hex()[:12]
        session = Session(
            session_id=session_id,
            request_tx=request_tx_id,
            requester=message["requester"],
            records=list(message["records"]),
            opened_at=self.clock,
            ttl=self.config.session_ttl,
        )
        node.sessions[session_id] = session
        state = self.requests.get(request_tx_id)
        if state is not None:
            state.stage = "delivered"
            state.session_org = node.org.id
            state.session_id = session_id
        self._trace(
            "session_opened",
            {
                "org": node.org.id,
                "session": session_id,
                "request": request_tx_id.hex(),
                "records": len(session.records),
            },
        )
        self._schedule(self.config.session_ttl, "session_expiry", (node.org.id, session_id))

    def _on_deny(self, node: Node, from_org: str, message: dict) -> None:
        # The sender already recorded the decision and the completion tx.
        return

    def _ev_session_expiry(self, org_id: str, session_id: str) -> None:
        node = self.nodes[org_id]
        session = node.sessions.get(session_id)
        if session is None or not session.expired(self.clock):
            return
        del node.sessions[session_id]
        self._trace("session_expired", {"org": org_id, "session": session_id})

    def request_outcome(self, request_tx_id: bytes) -> RequestOutcome:
        state = self.requests.get(request_tx_id)
        if state is None:
            raise SimError("unknown request")
        session = None
        if state.session_org is not None and state.session_id is not None:
            session = self.nodes[state.session_org].sessions.get(state.session_id)
        return RequestOutcome(request_tx_id, state.decision, session)

    def timeline_for(
        self, practitioner_id: str, window: Optional[tuple[int, int]] = None
    ):
        """Merged view over the practitioner's unexpired sessions."""
        sessions = []
        for node in self.nodes.values():
            for session in node.sessions.values():
                if session.requester.id == practitioner_id and not session.expired(self.clock):
                    sessions.append(session)
        return build_timeline(sessions, window)

    def shred(self, org_id: str, patient_id: str) -> None:
        node = self.nodes.get(org_id)
        if node is None:
            raise SimError(f"unknown organization {org_id}")
        node.store.shred(patient_id)

    # -- consent operations -----------------------------------------------------

    def register_study(self, researcher_id: str, study_id: str, quiz: Quiz) -> Transaction:
        researcher = PrincipalId(Kind.RESEARCHER, researcher_id)
        via = self._host_node(researcher)
        if researcher not in via.policy.principals:
            raise ConsentError(f"unknown researcher {researcher_id}")
        payload = consent_mod.make_study_registration(via.consent, (researcher,), study_id, quiz)
        self.quizzes[study_id] = quiz
        return self._sign_and_submit(via, researcher, via.org, payload)

    def invite(self, researcher_id: str, study_id: str, participant_id: str) -> Transaction:
        researcher = PrincipalId(Kind.RESEARCHER, researcher_id)
        participant = PrincipalId(Kind.PARTICIPANT, participant_id)
        via = self._host_node(researcher)
        if participant not in via.policy.principals:
            raise ConsentError(f"unknown participant {participant_id}")
        payload = consent_mod.make_invitation(via.consent, researcher, study_id, participant)
        return self._sign_and_submit(via, researcher, via.org, payload)

    def submit_attempt(self, participant_id: str, study_id: str, answers: list[int]) -> tuple[int, bool, Transaction]:
        participant = PrincipalId(Kind.PARTICIPANT, participant_id)
        via = self._host_node(participant)
        quiz = self.quizzes.get(study_id)
        if quiz is None:
            raise ConsentError(f"unknown study {study_id}")
        payload, wrong = consent_mod.make_attempt(via.consent, participant, study_id, quiz, answers)
        via.struggles.setdefault((study_id, participant_id), []).append(wrong)
        tx = self._sign_and_submit(via, participant, via.org, payload)
        return payload.mistakes, payload.passed, tx

    def sign_consent(self, participant_id: str, study_id: str) -> Transaction:
        participant = PrincipalId(Kind.PARTICIPANT, participant_id)
        via = self._host_node(participant)
        payload = consent_mod.make_signature(
            via.consent, participant, study_id, self.private_keys[participant]
        )
        return self._sign_and_submit(via, participant, via.org, payload)

    def withdraw_consent(self, participant_id: str, study_id: str) -> Transaction:
        participant = PrincipalId(Kind.PARTICIPANT, participant_id)
        via = self._host_node(participant)
        payload = consent_mod.make_withdrawal(via.consent, participant, study_id)
        return self._sign_and_submit(via, participant, via.org, payload)

    def publish_profile(
        self,
        participant_id: str,
        descriptors: list[str],
        discoverable: bool,
        study_overrides: Optional[dict[str, bool]] = None,
    ) -> Transaction:
        participant = PrincipalId(Kind.PARTICIPANT, participant_id)
        via = self._host_node(participant)
        if participant not in via.policy.principals:
            raise ConsentError(f"unknown participant {participant_id}")
        salts = {d: crypto.new_salt(self.rng) for d in descriptors}
        payload = consent_mod.make_profile(
            participant, descriptors, salts, discoverable, study_overrides
        )
        via.profile_salts[participant_id] = salts
        return self._sign_and_submit(via, participant, via.org, payload)

    def consent_dashboard(self, researcher_id: str, study_id: str):
        researcher = PrincipalId(Kind.RESEARCHER, researcher_id)
        via = self._host_node(researcher)
        struggles: dict[str, list[list[int]]] = {}
        for node in self.nodes.values():
            for (sid, pid), detail in node.struggles.items():
                if sid == study_id:
                    struggles[pid] = detail
        return consent_mod.consent_status(via.consent, researcher, study_id, struggles)

    # -- selective-disclosure matching ------------------------------------------

    def start_match(
        self, researcher_id: str, descriptors: list[str], study: Optional[str] = None
    ) -> int:
        if not descriptors:
            raise ConsentError("empty match query")
        researcher = PrincipalId(Kind.RESEARCHER, researcher_id)
        via = self._host_node(researcher)
        if researcher not in via.policy.principals:
            raise ConsentError(f"unknown researcher {researcher_id}")
        self._match_ids += 1
        match_id = self._match_ids
        state = MatchState(match_id, researcher, tuple(descriptors), study)
        self.matches[match_id] = state
        for pid in sorted(via.consent.profiles):
            profile = via.consent.profiles[pid]
            if not profile.effective_discoverable(study):
                continue
            state.outstanding.add(pid)
            self._send(
                via.org.id,
                self.host_org[pid],
                {
                    "type": "match_challenge",
                    "match_id": match_id,
                    "participant": pid,
                    "descriptors": tuple(descriptors),
                    "study": study,
                    "reply_to": via.org.id,
                },
            )
        if not state.outstanding:
            state.done = True
        return match_id

    def _on_match_challenge(self, node: Node, from_org: str, message: dict) -> None:
        pid = message["participant"]
        profile = node.consent.profiles.get(pid)
        salts = node.profile_salts.get(pid, {})
        disclosures: dict[str, bytes] = {}
        refused = True
        if profile is not None and profile.effective_discoverable(message["study"]):
            refused = False
            # Selective disclosure: only salts for queried descriptors the
            # participant actually holds ever cross the wire.
            for descriptor in message["descriptors"]:
                if descriptor in salts:
                    disclosures[descriptor] = salts[descriptor]
        self._send(
            node.org.id,
            message["reply_to"],
            {
                "type": "match_response",
                "match_id": message["match_id"],
                "participant": pid,
                "disclosures": disclosures,
                "refused": refused,
            },
        )

    def _on_match_response(self, node: Node, from_org: str, message: dict) -> None:
        state = self.matches.get(message["match_id"])
        if state is None or state.done:
            return
        pid = message["participant"]
        if pid not in state.outstanding:
            return
        state.outstanding.discard(pid)
        profile = node.consent.profiles.get(pid)
        if profile is not None and not message.get("refused", False):
            proven = {
                descriptor
                for descriptor, salt in message["disclosures"].items()
                if consent_mod.verify_disclosure(profile, descriptor, salt)
            }
            if proven.issuperset(state.descriptors):
                state.matched.add(pid)
        if not state.outstanding:
            state.done = True

    def match_result(self, match_id: int) -> list[str]:
        state = self.matches.get(match_id)
        if state is None:
            raise SimError("unknown match")
        if not state.done:
            raise SimError("match still outstanding")
        return sorted(state.matched)

    # -- faults ------------------------------------------------------------------

    def inject_fault(self, org_id: str, kind: str, at: Optional[int] = None) -> None:
        if org_id not in self.nodes:
            raise SimError(f"unknown organization {org_id}")
        if kind not in ("down", "up"):
            raise SimError(f"unknown fault kind {kind!r}")
        if at is None:
            self._ev_fault(org_id, kind)
        else:
            if at < self.clock:
                raise SimError("cannot schedule a fault in the past")
            self._schedule(at - self.clock, "fault", (org_id, kind))

    def _ev_fault(self, org_id: str, kind: str) -> None:
        node = self.nodes[org_id]
        if kind == "down":
            if not node.online:
                raise SimError(f"{org_id} is already down")
            node.online = False
            self._trace("node_down", {"org": org_id})
            return
        if node.online:
            raise SimError(f"{org_id} is already up")
        node.online = True
        self._trace("node_up", {"org": org_id})
        self._sync_node(node)
        parked, node.parked = node.parked, []
        for from_org, message in parked:
            self._schedule(self._latency(), "deliver", (from_org, org_id, message))
        self._maybe_schedule_attempt()

    def _sync_node(self, node: Node) -> None:
        best: Optional[Node] = None
        for name in self.nodes:
            peer = self.nodes[name]
            if peer is node or not peer.online:
                continue
            if best is None or peer.ledger.height > best.ledger.height:
                best = peer
        if best is None:
            return
        for block in best.ledger.blocks[node.ledger.height + 1 :]:
            self._on_block_committed(node, block, sync=True)

    # -- invariants and snapshots ---------------------------------------------

    def committed_chains(self) -> dict[str, list[bytes]]:
        return {
            name: [b.hash for b in node.ledger.blocks] for name, node in self.nodes.items()
        }

    def assert_prefix_consistent(self) -> None:
        chains = list(self.committed_chains().items())
        for i in range(len(chains)):
            for j in range(i + 1, len(chains)):
                a, b = chains[i][1], chains[j][1]
                shorter = min(len(a), len(b))
                if a[:shorter] != b[:shorter]:
                    raise SimError(
                        f"chain divergence between {chains[i][0]} and {chains[j][0]}"
                    )

    def trace_lines(self) -> list[str]:
        return [event.line() for event in self.trace]


def spawn_network(orgs: list[str], config: Optional[SimConfig] = None) -> Simulation:
    return Simulation(orgs, config or SimConfig())
