"""Software secure processor: PCR bank, private attestation key, signed reports.

One processor belongs to one exclave. Its attestation key is created inside
the processor and is never returned, serialized or pickled; the only thing
that leaves is the public key and the platform root's endorsement of it.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from . import crypto
from .crypto import (
    SCHEME,
    TAG_ENDORSEMENT,
    TAG_PCR_EXTEND,
    TAG_REPORT,
    Digest,
    KeyPair,
    b64d,
    b64e,
    from_hex,
    hash_parts,
    to_hex,
)

NUM_PCRS = 24
PCR_CODE = 11
PCR_RUNTIME = 23
ZERO = bytes(32)


class AttestationError(Exception):
    pass


class MeasureAfterAttest(AttestationError):
    pass


class NotMeasured(AttestationError):
    pass


def pcr_extend(value: Digest, data: Digest) -> Digest:
    return hash_parts(TAG_PCR_EXTEND, value, data)


class PcrBank:
    def __init__(self):
        self._regs = [ZERO] * NUM_PCRS

    def __getitem__(self, i: int) -> Digest:
        return self._regs[i]

    def extend(self, i: int, data: Digest) -> Digest:
        self._regs[i] = pcr_extend(self._regs[i], data)
        return self._regs[i]


def endorsement_message(att_pub: bytes) -> bytes:
    return TAG_ENDORSEMENT + SCHEME.encode() + b"\x00" + att_pub


@dataclass(frozen=True)
class AttestationReport:
    pcr11: Digest
    pcr23: Digest
    edr_digest: Digest
    counter: int
    sig: bytes
    att_pub: bytes
    endorsement: bytes
    scheme: str = SCHEME

    def signed_message(self) -> bytes:
        return report_message(self.pcr11, self.pcr23, self.edr_digest, self.counter, self.scheme)

    def to_dict(self) -> dict:
        return {
            "pcr11": to_hex(self.pcr11),
            "pcr23": to_hex(self.pcr23),
            "edr_digest": to_hex(self.edr_digest),
            "counter": self.counter,
            "sig": b64e(self.sig),
            "att_pub": b64e(self.att_pub),
            "endorsement": b64e(self.endorsement),
            "scheme": self.scheme,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttestationReport":
        if set(d) != {"pcr11", "pcr23", "edr_digest", "counter", "sig", "att_pub", "endorsement", "scheme"}:
            raise ValueError("unexpected report fields")
        counter = d["counter"]
        if type(counter) is not int or counter < 0 or not isinstance(d["scheme"], str):
            raise ValueError("bad report counter or scheme")
        return cls(
            pcr11=from_hex(d["pcr11"]),
            pcr23=from_hex(d["pcr23"]),
            edr_digest=from_hex(d["edr_digest"]),
            counter=counter,
            sig=b64d(d["sig"]),
            att_pub=b64d(d["att_pub"]),
            endorsement=b64d(d["endorsement"]),
            scheme=d["scheme"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def report_message(pcr11: Digest, pcr23: Digest, edr_digest: Digest, counter: int, scheme: str = SCHEME) -> bytes:
    body = {
        "counter": counter,
        "edr_digest": to_hex(edr_digest),
        "pcr11": to_hex(pcr11),
        "pcr23": to_hex(pcr23),
        "scheme": scheme,
    }
    return TAG_REPORT + json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


class SecureProcessor:
    """Holds the attestation key; serializes requests from its one exclave."""

    def __init__(self, platform_root: KeyPair, seed: bytes):
        key = crypto.keygen(seed)
        self.pcr = PcrBank()
        self.att_pub = key.verify_key
        self.endorsement = crypto.sign(platform_root, endorsement_message(key.verify_key))
        self.counter = 0
        self._measured = False
        self._lock = threading.Lock()
        # the private key lives only in this closure
        self._sign = lambda msg: crypto.sign(key, msg)

    def __repr__(self) -> str:
        return f"SecureProcessor(att_pub={self.att_pub.hex()[:16]}.., counter={self.counter})"

    def __reduce__(self):
        raise TypeError("SecureProcessor cannot be serialized")

    def __getstate__(self):
        raise TypeError("SecureProcessor cannot be serialized")

    def measure_code(self, code_measurement: Digest) -> None:
        with self._lock:
            if self._measured or self.counter:
                raise MeasureAfterAttest("code already measured or processor already attested")
            self.pcr.extend(PCR_CODE, code_measurement)
            self._measured = True

    def attest(self, edr_digest: Digest) -> AttestationReport:
        with self._lock:
            if not self._measured:
                raise NotMeasured("attest called before code measurement")
            pcr23 = self.pcr.extend(PCR_RUNTIME, edr_digest)
            self.counter += 1
            pcr11 = self.pcr[PCR_CODE]
            sig = self._sign(report_message(pcr11, pcr23, edr_digest, self.counter))
            return AttestationReport(pcr11, pcr23, edr_digest, self.counter, sig, self.att_pub, self.endorsement)


def sp_create(platform_root: KeyPair, seed: bytes) -> tuple[SecureProcessor, bytes]:
    sp = SecureProcessor(platform_root, seed)
    return sp, sp.endorsement


def verify_report(report: AttestationReport, platform_root_pub: bytes) -> bool:
    """Endorsement chain and report signature both check out."""
    try:
        if report.scheme != SCHEME:
            return False
        if not crypto.verify(platform_root_pub, endorsement_message(report.att_pub), report.endorsement):
            return False
        return crypto.verify(report.att_pub, report.signed_message(), report.sig)
    except (AttributeError, TypeError, ValueError):
        return False
