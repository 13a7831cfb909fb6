"""Hashing and signatures shared by every other module.

All multi-part hashes carry a one-byte domain tag as their first input.
The tags in use are collected here so that no two call sites collide.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

SCHEME = "ed25519"
DIGEST_SIZE = 32
SIGNATURE_SIZE = 64

# domain-separation tags
TAG_MERKLE_LEAF = b"\x00"
TAG_MERKLE_NODE = b"\x01"
TAG_COMMITMENT = b"\x02"
TAG_PCR_EXTEND = b"\x03"
TAG_KEY_DERIVE = b"\x04"
TAG_REPORT = b"\x05"
TAG_ENDORSEMENT = b"\x06"
TAG_ISSUER = b"\x07"
TAG_SEED_DERIVE = b"\x08"

Digest = bytes


def hash_bytes(data: bytes) -> Digest:
    """SHA-256 of ``data``."""
    return hashlib.sha256(data).digest()


def hash_parts(tag: bytes, *parts: bytes) -> Digest:
    h = hashlib.sha256(tag)
    for p in parts:
        h.update(p)
    return h.digest()


@dataclass(frozen=True)
class KeyPair:
    verify_key: bytes
    _private: Ed25519PrivateKey = field(repr=False, compare=False)

    def __reduce__(self):
        raise TypeError("KeyPair objects are not serializable")


def keygen(seed: bytes) -> KeyPair:
    """Deterministic Ed25519 key pair from a 32-byte seed."""
    if len(seed) != 32:
        raise ValueError(f"seed must be 32 bytes, got {len(seed)}")
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    pk = sk.public_key().public_bytes_raw()
    return KeyPair(verify_key=pk, _private=sk)


def derive_key(master: bytes, label: str) -> KeyPair:
    """Key pair derived from a master seed and a label (simulation keys)."""
    return keygen(hash_parts(TAG_KEY_DERIVE, master, label.encode("utf-8")))


def sign(key: KeyPair, msg: bytes) -> bytes:
    return key._private.sign(msg)


def verify(verify_key: bytes, msg: bytes, sig: bytes) -> bool:
    """True iff ``sig`` is a valid signature of ``msg``; malformed input gives False."""
    try:
        if len(verify_key) != 32 or len(sig) != SIGNATURE_SIZE:
            return False
        Ed25519PublicKey.from_public_bytes(bytes(verify_key)).verify(bytes(sig), bytes(msg))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


# -- encodings used in JSON envelopes ------------------------------------


def to_hex(d: Digest) -> str:
    return d.hex()


def from_hex(s: str) -> Digest:
    """Parse a lowercase 64-char hex digest; anything else raises ValueError."""
    if not isinstance(s, str) or len(s) != 2 * DIGEST_SIZE or s != s.lower():
        raise ValueError(f"not a canonical digest: {s!r}")
    return bytes.fromhex(s)


def b64e(b: bytes) -> str:
    return base64.b64encode(b).decode("ascii")


def b64d(s: str) -> bytes:
    """Strict base64 decode; rejects non-canonical encodings."""
    if not isinstance(s, str):
        raise ValueError("expected base64 string")
    try:
        raw = base64.b64decode(s.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as e:
        raise ValueError(f"bad base64: {s!r}") from e
    if base64.b64encode(raw).decode("ascii") != s:
        raise ValueError(f"non-canonical base64: {s!r}")
    return raw


def derive_seed(base: int, *labels: object) -> int:
    """64-bit seed derived from ``base`` and a tuple of labels."""
    msg = "\x1f".join(str(x) for x in labels).encode("utf-8")
    d = hash_parts(TAG_SEED_DERIVE, base.to_bytes(8, "big"), msg)
    return int.from_bytes(d[:8], "big")
