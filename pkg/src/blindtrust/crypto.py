"""Hash, keyed-MAC and signature services plus the canonical byte encodings.

Everything that gets hashed by more than one party is encoded through the
helpers in this module, so producer and verifier agree byte for byte.

Encoding rules (see docs/encoding.md):

* command codes and response codes: 4 bytes, big-endian
* PCR indices and handles: 4 bytes, big-endian
* length prefixes: 2 bytes, big-endian
* hash algorithm identifier for SHA-256: ``0x000B``
* names: ``0x000B || SHA-256(public area)`` (34 bytes)
"""

from __future__ import annotations

import enum
import functools
import hashlib
import hmac as _hmac
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

DIGEST_SIZE = 32
NAME_SIZE = 34
ZERO_DIGEST = bytes(DIGEST_SIZE)

ALG_SHA256 = 0x000B
ALG_ECC = 0x0023
ALG_KEYEDHASH = 0x0008

# TPM_GENERATED_VALUE
TPM_GENERATED = 0xFF544347

RC_SUCCESS = 0x00000000

# Platform hierarchy authorization handle (TPM_RH_PLATFORM).
RH_PLATFORM = 0x4000000C

_CURVE = ec.SECP256R1()
_CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)


@enum.unique
class CommandCode(enum.IntEnum):
    """TPM_CC values for the commands the protocols use (TCG Part 2)."""

    NV_UndefineSpaceSpecial = 0x0000011F
    EvictControl = 0x00000120
    NV_DefineSpace = 0x0000012A
    NV_Extend = 0x00000136
    PolicyNV = 0x00000149
    CertifyCreation = 0x0000014A
    GetSessionAuditDigest = 0x0000014D
    NV_Read = 0x0000014E
    Create = 0x00000153
    Load = 0x00000157
    Sign = 0x0000015D
    PolicySigned = 0x00000160
    FlushContext = 0x00000165
    LoadExternal = 0x00000167
    PolicyAuthorize = 0x0000016A
    PolicyCommandCode = 0x0000016C
    StartAuthSession = 0x00000176
    VerifySignature = 0x00000177
    PolicyPCR = 0x0000017F
    PCR_Extend = 0x00000182
    NV_Certify = 0x00000184


class Tag(enum.IntEnum):
    """TPM_ST structure tags used for tickets and attestation blobs."""

    CREATION = 0x8021
    VERIFIED = 0x8022
    ATTEST_NV = 0x8014
    ATTEST_SESSION_AUDIT = 0x8016
    ATTEST_CREATION = 0x801A


def u8(value: int) -> bytes:
    return struct.pack(">B", value)


def u16(value: int) -> bytes:
    return struct.pack(">H", value)


def u32(value: int) -> bytes:
    return struct.pack(">I", value)


def enc_cc(cc: int) -> bytes:
    return u32(int(cc))


def enc_pcr_index(idx: int) -> bytes:
    return u32(idx)


def len2(data: bytes) -> bytes:
    """2-byte big-endian length prefix followed by the data."""
    if len(data) > 0xFFFF:
        raise ValueError("field too long for a 2-byte length prefix")
    return u16(len(data)) + data


def enc_pcr_selection(indices: Sequence[int]) -> bytes:
    """count byte followed by each index as 4-byte big-endian, ascending."""
    return u8(len(indices)) + b"".join(u32(i) for i in indices)


def pack_fields(fields: Iterable[bytes]) -> bytes:
    """Concatenate length-prefixed fields; the inverse is :func:`unpack_fields`."""
    return b"".join(len2(f) for f in fields)


def unpack_fields(data: bytes) -> list[bytes]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + 2 > len(data):
            raise ValueError("truncated length prefix")
        (size,) = struct.unpack_from(">H", data, pos)
        pos += 2
        if pos + size > len(data):
            raise ValueError("truncated field")
        out.append(data[pos:pos + size])
        pos += size
    return out


def check_digest(value: bytes) -> bytes:
    if not isinstance(value, (bytes, bytearray)) or len(value) != DIGEST_SIZE:
        raise ValueError("digest must be exactly 32 bytes")
    return bytes(value)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    return _hmac.new(key, data, hashlib.sha256).digest()


def extend(old: bytes, value: bytes) -> bytes:
    """The PCR/NV accumulation ``H(old || value)``."""
    return sha256(old + value)


def compute_name(public_area: bytes) -> bytes:
    return u16(ALG_SHA256) + sha256(public_area)


@dataclass(frozen=True)
class HmacKey:
    key: bytes

    def __post_init__(self):
        check_digest(self.key)

    def mac(self, data: bytes) -> bytes:
        return hmac_sha256(self.key, data)

    def __repr__(self) -> str:
        return "HmacKey(<redacted>)"


@dataclass(frozen=True)
class SigningKeyPair:
    """A P-256 key pair with deterministic (RFC 6979) signatures."""

    public: bytes  # uncompressed SEC1 point, 65 bytes
    secret: bytes  # 32-byte scalar
    scheme: str = "ecdsa-p256-sha256"

    @classmethod
    def from_seed(cls, seed: bytes) -> "SigningKeyPair":
        scalar = int.from_bytes(sha256(b"keygen" + seed), "big") % (_CURVE_ORDER - 1) + 1
        return cls.from_scalar(scalar)

    @classmethod
    def from_scalar(cls, scalar: int) -> "SigningKeyPair":
        priv = ec.derive_private_key(scalar, _CURVE)
        public = priv.public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
        )
        return cls(public=public, secret=scalar.to_bytes(32, "big"))

    def sign(self, message: bytes) -> bytes:
        return sign(self, message)

    def __repr__(self) -> str:
        return f"SigningKeyPair(public={self.public.hex()[:16]}..., secret=<redacted>)"


@functools.lru_cache(maxsize=256)
def _private_key(secret: bytes) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(int.from_bytes(secret, "big"), _CURVE)


@functools.lru_cache(maxsize=256)
def _public_key(public: bytes) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, public)


def sign(key: SigningKeyPair, message: bytes) -> bytes:
    """Return a fixed-width 64-byte ``r || s`` signature over ``message``."""
    priv = _private_key(key.secret)
    der = priv.sign(message, _ECDSA)
    r, s = decode_dss_signature(der)
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """Check a signature; malformed keys or signatures simply yield False."""
    try:
        if len(signature) != 64:
            return False
        pub = _public_key(bytes(public))
        r = int.from_bytes(signature[:32], "big")
        s = int.from_bytes(signature[32:], "big")
        pub.verify(encode_dss_signature(r, s), bytes(message), _ECDSA)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False
