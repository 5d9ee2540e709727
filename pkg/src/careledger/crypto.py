"""Hashing, Ed25519 signing, and salted identity commitments.

Keys are carried everywhere as raw 32-byte strings so that simulation state
stays plain data (copyable, hashable). Key objects are built on demand and
memoized by their byte content; verification results are memoized by the
exact (public key, signature, message) bytes, which is sound because any
tampering changes the cache key.
"""

from __future__ import annotations

import hashlib
import random

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

SALT_LEN = 16
SIGNATURE_LEN = 64
KEY_LEN = 32

_signer_cache: dict[bytes, Ed25519PrivateKey] = {}
_verifier_cache: dict[bytes, Ed25519PublicKey] = {}
_verify_memo: dict[tuple[bytes, bytes, bytes], bool] = {}
_VERIFY_MEMO_LIMIT = 250_000


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def generate_keypair(rng: random.Random) -> tuple[bytes, bytes]:
    """Derive an Ed25519 keypair from the seeded generator. Returns (private, public)."""
    seed = rng.getrandbits(256).to_bytes(32, "big")
    private = Ed25519PrivateKey.from_private_bytes(seed)
    public = private.public_key().public_bytes_raw()
    return seed, public


def sign(private: bytes, message: bytes) -> bytes:
    signer = _signer_cache.get(private)
    if signer is None:
        signer = Ed25519PrivateKey.from_private_bytes(private)
        _signer_cache[private] = signer
    return signer.sign(message)


def verify(public: bytes, signature: bytes, message: bytes) -> bool:
    memo_key = (public, signature, message)
    cached = _verify_memo.get(memo_key)
    if cached is not None:
        return cached
    verifier = _verifier_cache.get(public)
    if verifier is None:
        try:
            verifier = Ed25519PublicKey.from_public_bytes(public)
        except ValueError:
            return False
        _verifier_cache[public] = verifier
    try:
        verifier.verify(signature, message)
        ok = True
    except InvalidSignature:
        ok = False
    if len(_verify_memo) >= _VERIFY_MEMO_LIMIT:
        _verify_memo.clear()
    _verify_memo[memo_key] = ok
    return ok


def new_salt(rng: random.Random) -> bytes:
    return rng.getrandbits(8 * SALT_LEN).to_bytes(SALT_LEN, "big")


def commitment(salt: bytes, identifier: str) -> bytes:
    """Salted binding of an off-chain identifier: SHA-256(salt || UTF-8 identifier)."""
    return sha256(salt + identifier.encode("utf-8"))
