"""Hashing, signing, block construction, chain validation, audit, persistence."""

import hashlib
import random
import struct

import pytest

from careledger import crypto
from careledger.errors import ChainError
from careledger.ledger import (
    Block,
    Category,
    DataRequestRecorded,
    Kind,
    LedgerState,
    PrincipalId,
    RegisterPrincipal,
    Transaction,
    ZERO_HASH,
    block_hash,
    build_block,
    canonical_encode,
    compute_tx_root,
    endorse_block,
    query_audit,
    quorum,
    read_ledger,
    sign_tx,
    tx_hash,
    validate_chain,
    verify_tx,
    write_ledger,
)
from careledger.simnet import SimConfig, spawn_network

from conftest import build_care_sim

# Computed once by a standalone reference script (manual struct packing and
# hashlib only); the hand-built encoding below re-derives it in-test.
FIXTURE_TX_DIGEST = "201adee0e26e326e3e14251860c76ed51ce86c40a6b46c37cda005a93b0e6531"
GENESIS_HASH_SEED42 = "b849cda231601c61468805080bcea6fc9de056f11eddb31ebba9c064b1940e07"


def fixture_tx() -> Transaction:
    return Transaction(
        1000,
        PrincipalId(Kind.PRACTITIONER, "nurse1"),
        PrincipalId(Kind.ORGANIZATION, "homecare"),
        DataRequestRecorded(
            PrincipalId(Kind.PRACTITIONER, "nurse1"),
            PrincipalId(Kind.ORGANIZATION, "homecare"),
            PrincipalId(Kind.ORGANIZATION, "hospital"),
            PrincipalId(Kind.PATIENT, "p001"),
            Category.VITALS,
            False,
        ),
    )


def hand_built_fixture_encoding() -> bytes:
    # Built field by field from the documented layout, without the codec.
    def u32(n):
        return struct.pack(">I", n)

    def s(text):
        raw = text.encode()
        return u32(len(raw)) + raw

    def principal(code, pid):
        return bytes([code]) + s(pid)

    return b"".join(
        [
            struct.pack(">Q", 1000),
            principal(1, "nurse1"),
            principal(0, "homecare"),
            bytes([5]),
            principal(1, "nurse1"),
            principal(0, "homecare"),
            principal(0, "hospital"),
            principal(2, "p001"),
            bytes([0]),
            bytes([0]),
        ]
    )


class TestHashing:
    def test_sha256_empty_reference_vector(self):
        assert (
            crypto.sha256(b"").hex()
            == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        )
        assert crypto.sha256(b"") == hashlib.sha256(b"").digest()

    def test_fixture_tx_hash_matches_hand_built_encoding(self):
        tx = fixture_tx()
        expected = hand_built_fixture_encoding()
        assert canonical_encode(tx) == expected
        assert tx_hash(tx) == hashlib.sha256(expected).digest()
        assert tx_hash(tx).hex() == FIXTURE_TX_DIGEST

    def test_single_byte_flip_changes_digest(self):
        base = canonical_encode(fixture_tx())
        digest = hashlib.sha256(base).digest()
        for i in range(len(base)):
            mutated = bytearray(base)
            mutated[i] ^= 0x01
            assert hashlib.sha256(bytes(mutated)).digest() != digest

    def test_genesis_hash_stable_across_runs(self):
        for _ in range(2):
            sim = spawn_network(["hospital", "homecare", "pharmacy"], SimConfig(seed=42))
            assert sim.nodes["hospital"].ledger.blocks[0].hash.hex() == GENESIS_HASH_SEED42


class TestSignatures:
    def setup_method(self):
        rng = random.Random(7)
        self.private, self.public = crypto.generate_keypair(rng)
        self.other_private, self.other_public = crypto.generate_keypair(rng)
        self.author = PrincipalId(Kind.PRACTITIONER, "nurse1")
        self.registry = {self.author: self.public}

    def test_sign_then_verify(self):
        tx = sign_tx(fixture_tx(), self.private)
        assert verify_tx(tx, self.registry)

    def test_verify_with_wrong_key_fails(self):
        tx = sign_tx(fixture_tx(), self.private)
        result = verify_tx(tx, {self.author: self.other_public})
        assert not result
        assert result.reason == "bad_signature"

    def test_unknown_author_distinct_from_bad_signature(self):
        tx = sign_tx(fixture_tx(), self.private)
        result = verify_tx(tx, {})
        assert not result
        assert result.reason == "unknown_author"

    def test_unsigned_rejected(self):
        result = verify_tx(fixture_tx(), self.registry)
        assert result.reason == "missing_signature"

    def test_every_payload_bit_flip_breaks_verification(self):
        tx = sign_tx(fixture_tx(), self.private)
        encoding = canonical_encode(tx)
        for byte_index in range(len(encoding)):
            for bit in range(8):
                mutated = bytearray(encoding)
                mutated[byte_index] ^= 1 << bit
                # The signature was made over the original tx id.
                assert not crypto.verify(
                    self.public, tx.signature, hashlib.sha256(bytes(mutated)).digest()
                )


def _two_org_chain(seed=42):
    """Committed multi-block chain via the simulator (hospital POV)."""
    sim = build_care_sim(seed)
    return sim, sim.nodes["hospital"].ledger


class TestBlocks:
    def _signed_regs(self, n=3):
        rng = random.Random(1)
        txs, registry, keys = [], {}, {}
        for i in range(n):
            private, public = crypto.generate_keypair(rng)
            org = PrincipalId(Kind.ORGANIZATION, f"org{i}")
            keys[org] = private
            registry[org] = public
            tx = Transaction(0, org, org, RegisterPrincipal(org, public))
            txs.append(sign_tx(tx, private))
        return txs, registry, keys

    def _genesis(self, txs, keys):
        genesis = Block(
            height=0,
            prev_hash=ZERO_HASH,
            timestamp=0,
            proposer=txs[0].author,
            tx_root=compute_tx_root(txs),
            transactions=tuple(txs),
        )
        endorsements = tuple(
            (org, endorse_block(genesis, key)) for org, key in sorted(keys.items())
        )
        return Block(
            height=0,
            prev_hash=ZERO_HASH,
            timestamp=0,
            proposer=genesis.proposer,
            tx_root=genesis.tx_root,
            transactions=genesis.transactions,
            endorsements=endorsements,
        )

    def test_build_block_links_to_previous(self):
        txs, registry, keys = self._signed_regs()
        genesis = self._genesis(txs, keys)
        rng = random.Random(5)
        private, public = crypto.generate_keypair(rng)
        patient = PrincipalId(Kind.PATIENT, "p9")
        reg = sign_tx(
            Transaction(10, patient, txs[0].author, RegisterPrincipal(patient, public)),
            private,
        )
        block = build_block([reg], genesis, txs[0].author, 1000, registry)
        assert block.height == 1
        assert block.prev_hash == genesis.hash
        assert block.endorsements == ()

    def test_single_tx_root_is_hash_of_tx_id(self):
        txs, _, _ = self._signed_regs(1)
        assert compute_tx_root(txs[:1]) == hashlib.sha256(txs[0].tx_id).digest()

    def test_reordering_changes_tx_root(self):
        txs, _, _ = self._signed_regs(3)
        assert compute_tx_root(txs) != compute_tx_root(list(reversed(txs)))

    def test_invalid_tx_rejected_by_name(self):
        txs, registry, keys = self._signed_regs()
        genesis = self._genesis(txs, keys)
        bad = fixture_tx()  # unsigned, unknown author
        with pytest.raises(ChainError) as err:
            build_block([bad], genesis, txs[0].author, 1000, registry)
        assert bad.tx_id.hex() in str(err.value)

    def test_empty_pending_rejected(self):
        txs, registry, keys = self._signed_regs()
        genesis = self._genesis(txs, keys)
        with pytest.raises(ChainError):
            build_block([], genesis, txs[0].author, 1000, registry)

    def test_block_hash_excludes_endorsements(self):
        txs, _, keys = self._signed_regs()
        with_endorsements = self._genesis(txs, keys)
        without = Block(
            height=0,
            prev_hash=ZERO_HASH,
            timestamp=0,
            proposer=with_endorsements.proposer,
            tx_root=with_endorsements.tx_root,
            transactions=with_endorsements.transactions,
        )
        assert block_hash(with_endorsements) == block_hash(without)

    def test_tx_order_changes_block_hash(self):
        txs, _, keys = self._signed_regs()
        a = self._genesis(txs, keys)
        b = self._genesis(list(reversed(txs)), keys)
        assert a.hash != b.hash


class TestQuorum:
    def test_quorum_formula_table(self):
        # floor(2n/3) + 1
        assert [quorum(n) for n in range(1, 9)] == [1, 2, 3, 3, 4, 5, 5, 6]


class TestValidation:
    def test_fresh_simulated_chain_validates(self):
        _, ledger = _two_org_chain()
        assert len(ledger.blocks) >= 6
        assert validate_chain(ledger).ok

    def test_tampered_tx_detected_at_its_height(self):
        _, ledger = _two_org_chain()
        target = 3
        block = ledger.blocks[target]
        original = block.transactions[0]
        tampered_payload = RegisterPrincipal(
            PrincipalId(Kind.PATIENT, "p00X"),
            original.payload.public_key,
            original.payload.org_binding,
            original.payload.identity_commitment,
        )
        tampered_tx = Transaction(
            original.timestamp, original.author, original.author_org,
            tampered_payload, original.signature,
        )
        forged = Block(
            height=block.height,
            prev_hash=block.prev_hash,
            timestamp=block.timestamp,
            proposer=block.proposer,
            tx_root=block.tx_root,
            transactions=(tampered_tx,) + block.transactions[1:],
            endorsements=block.endorsements,
        )
        mutated = LedgerState()
        for i, b in enumerate(ledger.blocks):
            mutated.append(forged if i == target else b)
        report = validate_chain(mutated)
        assert not report.ok
        assert report.violation.height == target
        assert report.violation.rule in ("tx_root", "tx_signature")

    def test_dropped_endorsement_below_quorum_detected(self):
        _, ledger = _two_org_chain()
        target = 2
        block = ledger.blocks[target]
        assert len(block.endorsements) == 2  # two orgs, quorum 2
        thin = Block(
            height=block.height,
            prev_hash=block.prev_hash,
            timestamp=block.timestamp,
            proposer=block.proposer,
            tx_root=block.tx_root,
            transactions=block.transactions,
            endorsements=block.endorsements[:1],
        )
        mutated = LedgerState()
        for i, b in enumerate(ledger.blocks):
            mutated.append(thin if i == target else b)
        report = validate_chain(mutated)
        assert not report.ok
        assert report.violation.height == target
        assert report.violation.rule == "quorum"

    def test_genesis_prev_hash_must_be_zero(self):
        _, ledger = _two_org_chain()
        g = ledger.blocks[0]
        forged = Block(
            height=0,
            prev_hash=b"\x01" + bytes(31),
            timestamp=g.timestamp,
            proposer=g.proposer,
            tx_root=g.tx_root,
            transactions=g.transactions,
            endorsements=g.endorsements,
        )
        mutated = LedgerState()
        mutated.append(forged)
        for b in ledger.blocks[1:]:
            mutated.append(b)
        report = validate_chain(mutated)
        assert not report.ok
        assert report.violation.height in (0, 1)


class TestAppendOnly:
    def test_out_of_order_append_rejected(self):
        _, ledger = _two_org_chain()
        fresh = LedgerState()
        with pytest.raises(ChainError):
            fresh.append(ledger.blocks[2])

    def test_no_removal_surface(self):
        exposed = [n for n in dir(LedgerState) if not n.startswith("_")]
        assert not any("remove" in n or "delete" in n or "pop" in n for n in exposed)


class TestAudit:
    def test_empty_chain_empty_filter(self):
        # A network of one org: genesis only, one registration tx.
        sim = spawn_network(["solo"], SimConfig(seed=1))
        entries = query_audit(sim.nodes["solo"].ledger)
        assert len(entries) == 1
        assert entries[0].action == "RegisterPrincipal"

    def test_bijection_with_committed_transactions(self):
        _, ledger = _two_org_chain()
        entries = query_audit(ledger)
        assert len(entries) == sum(len(b.transactions) for b in ledger.blocks)
        assert [e.tx_id for e in entries] == [tx.tx_id for _, _, tx in ledger.transactions()]

    def test_subject_filter_counts_accesses(self):
        sim = build_care_sim()
        from careledger.exchange import submit_request

        for _ in range(3):
            sim.tick(1500)
            submit_request(
                sim,
                PrincipalId(Kind.PRACTITIONER, "nurse1"),
                PrincipalId(Kind.ORGANIZATION, "homecare"),
                PrincipalId(Kind.ORGANIZATION, "hospital"),
                PrincipalId(Kind.PATIENT, "p001"),
                Category.VITALS,
            )
        ledger = sim.nodes["hospital"].ledger
        entries = query_audit(ledger, subject="p001")
        requests = [e for e in entries if e.action == "DataRequestRecorded"]
        completions = [e for e in entries if e.action == "AccessCompleted"]
        assert len(requests) == 3
        assert len(completions) == 3

    def test_ordering_is_chain_order(self):
        _, ledger = _two_org_chain()
        entries = query_audit(ledger)
        keys = [(e.height, e.position) for e in entries]
        assert keys == sorted(keys)

    def test_inverted_time_range_rejected(self):
        _, ledger = _two_org_chain()
        with pytest.raises(ValueError):
            query_audit(ledger, time_from=100, time_to=50)

    def test_time_range_bounds_inclusive(self):
        _, ledger = _two_org_chain()
        all_entries = query_audit(ledger)
        t = all_entries[3].timestamp
        hits = query_audit(ledger, time_from=t, time_to=t)
        assert hits
        assert all(e.timestamp == t for e in hits)


class TestPersistence:
    def test_round_trip_preserves_chain(self, tmp_path):
        _, ledger = _two_org_chain()
        path = tmp_path / "chain.ledger"
        write_ledger(ledger, str(path))
        loaded = read_ledger(str(path))
        assert len(loaded.blocks) == len(ledger.blocks)
        assert [b.hash for b in loaded.blocks] == [b.hash for b in ledger.blocks]
        assert validate_chain(loaded).ok

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.ledger"
        path.write_bytes(b"")
        with pytest.raises(ChainError):
            read_ledger(str(path))

    def test_truncated_file_rejected(self, tmp_path):
        _, ledger = _two_org_chain()
        path = tmp_path / "chain.ledger"
        write_ledger(ledger, str(path))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(ChainError):
            read_ledger(str(path))

    def test_audit_export_is_json_lines(self, tmp_path):
        import json

        _, ledger = _two_org_chain()
        for entry in query_audit(ledger):
            row = json.loads(entry.to_json())
            assert set(row) == {
                "tx_id", "height", "timestamp", "actor", "actor_org",
                "action", "subject", "detail",
            }
