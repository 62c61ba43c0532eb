"""Protocol request/response bodies exchanged between orchestrator and VFs.

Every body converts to and from a JSON-friendly payload in which byte
fields are lowercase hex strings.  Field order and names are part of the
wire contract documented in docs/schemas.md.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional


class PayloadError(ValueError):
    """A payload could not be turned back into a message body."""


class Message:
    """Mixin giving dataclass bodies a lossless payload round trip."""

    def to_payload(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (bytes, bytearray)):
                value = bytes(value).hex()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_payload(cls, payload: dict):
        if not isinstance(payload, dict):
            raise PayloadError(f"{cls.__name__}: payload is not an object")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in payload:
                if f.default is not dataclasses.MISSING:
                    continue
                raise PayloadError(f"{cls.__name__}: missing field {f.name!r}")
            value = payload[f.name]
            kind = str(f.type)
            try:
                if "bytes" in kind:
                    value = None if value is None else bytes.fromhex(value)
                elif kind.startswith("tuple"):
                    value = tuple(int(v) for v in value)
                elif kind == "bool":
                    if not isinstance(value, bool):
                        raise TypeError("expected a boolean")
                elif "int" in kind:
                    value = None if value is None else int(value)
                elif kind == "str":
                    value = str(value)
            except (TypeError, ValueError) as exc:
                raise PayloadError(f"{cls.__name__}.{f.name}: {exc}") from exc
            kwargs[f.name] = value
        return cls(**kwargs)


@dataclass(frozen=True)
class AkCreationRequest(Message):
    attributes: int
    h_pol: bytes


@dataclass(frozen=True)
class AkCertificateResponse(Message):
    cert_info: bytes
    signature: bytes
    ak_public: bytes


@dataclass(frozen=True)
class UpdateRequest(Message):
    fqpn: str
    idx: int
    is_nv: bool
    h_pol: bytes
    h_pol_hash: bytes
    signature: bytes


@dataclass(frozen=True)
class AuditResponse(Message):
    idx: int
    is_nv: bool
    audit_info: bytes
    signature: bytes


@dataclass(frozen=True)
class AttachRequest(Message):
    idx: int
    is_nv: bool
    iv: bytes
    nv_attributes: int = 0
    h_pol: Optional[bytes] = None


@dataclass(frozen=True)
class NvCertResponse(Message):
    idx: int
    cert_info: bytes
    signature: bytes


@dataclass(frozen=True)
class DetachRequest(Message):
    idx: int
    is_nv: bool
    # Orchestrator-chosen digest the VF must extend (audited) before
    # dropping a normal PCR that the latest policy still covers.
    poison: Optional[bytes] = None


@dataclass(frozen=True)
class SessionNonce(Message):
    idx: int
    session: int
    nonce: bytes


@dataclass(frozen=True)
class DeletionGrant(Message):
    idx: int
    session: int
    h_cp: bytes
    a_hash_signature: bytes
    h_pol: bytes
    h_pol_hash: bytes
    h_pol_signature: bytes


@dataclass(frozen=True)
class Advertisement(Message):
    vf_id: str
    ak_public: bytes
    serial: int
    signature: bytes


@dataclass(frozen=True)
class Revocation(Message):
    vf_id: str
    serial: int
    signature: bytes


@dataclass(frozen=True)
class Challenge(Message):
    nonce: bytes


@dataclass(frozen=True)
class ChallengeResponse(Message):
    signature: bytes


def advertisement_bytes(vf_id: str, ak_public: bytes, serial: int) -> bytes:
    """What the orchestrator signs when vouching for an enrolled AK.

    ``serial`` orders directory changes so a stale notice cannot undo a
    later one.
    """
    vid = vf_id.encode()
    return b"ADVERTISE" + len(vid).to_bytes(2, "big") + vid + serial.to_bytes(4, "big") + ak_public


def revocation_bytes(vf_id: str, serial: int) -> bytes:
    vid = vf_id.encode()
    return b"REVOKE" + len(vid).to_bytes(2, "big") + vid + serial.to_bytes(4, "big")
