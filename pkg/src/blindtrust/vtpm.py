"""A virtual TPM covering the TPM 2.0 command subset used by the protocols.

Digest accumulation follows the TPM 2.0 enhanced-authorization rules for
PolicyNV, PolicyPCR, PolicySigned, PolicyCommandCode and PolicyAuthorize, and
session audit follows the cpHash/rpHash witness rule.  Responses that leave
the TPM (attestation structures, tickets, blobs) never carry the platform
seed, the hierarchy proof or any private key material in the clear.
"""

from __future__ import annotations

import functools
import hmac
import random
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from . import crypto
from .crypto import (
    ALG_ECC,
    ALG_SHA256,
    RC_SUCCESS,
    RH_PLATFORM,
    TPM_GENERATED,
    ZERO_DIGEST,
    CommandCode,
    SigningKeyPair,
    Tag,
    check_digest,
    enc_cc,
    enc_pcr_index,
    enc_pcr_selection,
    hmac_sha256,
    len2,
    pack_fields,
    sha256,
    u16,
    u32,
    unpack_fields,
)

PCR_COUNT = 24
MAX_SESSIONS = 8
NONCE_SIZE = 16

NV_INDEX_FIRST = 0x01000000
NV_INDEX_LAST = 0x0100FFFF
TRANSIENT_FIRST = 0x80000000
PERSISTENT_FIRST = 0x81000000
HMAC_SESSION_FIRST = 0x02000000
POLICY_SESSION_FIRST = 0x03000000


class ObjectAttr:
    """TPMA_OBJECT bits."""

    FIXED_TPM = 0x00000002
    FIXED_PARENT = 0x00000010
    SENSITIVE_DATA_ORIGIN = 0x00000020
    USER_WITH_AUTH = 0x00000040
    ADMIN_WITH_POLICY = 0x00000080
    NO_DA = 0x00000400
    RESTRICTED = 0x00010000
    DECRYPT = 0x00020000
    SIGN = 0x00040000


class NvAttr:
    """TPMA_NV bits (TPM_NT occupies bits 4..7)."""

    AUTHWRITE = 0x00000004
    POLICYWRITE = 0x00000008
    NT_EXTEND = 0x00000040
    POLICY_DELETE = 0x00000400
    AUTHREAD = 0x00040000
    NO_DA = 0x02000000
    WRITTEN = 0x20000000
    PLATFORMCREATE = 0x40000000


_KEY_BASE = ObjectAttr.FIXED_TPM | ObjectAttr.FIXED_PARENT | ObjectAttr.SENSITIVE_DATA_ORIGIN
STORAGE_KEY_ATTRS = _KEY_BASE | ObjectAttr.USER_WITH_AUTH | ObjectAttr.RESTRICTED | ObjectAttr.DECRYPT
ENDORSEMENT_KEY_ATTRS = _KEY_BASE | ObjectAttr.USER_WITH_AUTH | ObjectAttr.RESTRICTED | ObjectAttr.SIGN
# No USER_WITH_AUTH: every use of the AK needs a satisfied policy session.
ATTESTATION_KEY_ATTRS = _KEY_BASE | ObjectAttr.ADMIN_WITH_POLICY | ObjectAttr.SIGN | ObjectAttr.NO_DA

NVPCR_ATTRS = (
    NvAttr.AUTHWRITE
    | NvAttr.AUTHREAD
    | NvAttr.NT_EXTEND
    | NvAttr.POLICY_DELETE
    | NvAttr.NO_DA
    | NvAttr.PLATFORMCREATE
)


class TpmError(Exception):
    """A TPM command failed; ``code`` is a short stable identifier."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


# ---------------------------------------------------------------------------
# Public areas and names
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPublic:
    attributes: int
    auth_policy: bytes
    public_key: bytes
    type_alg: int = ALG_ECC
    name_alg: int = ALG_SHA256

    def encode(self) -> bytes:
        return (
            u16(self.type_alg)
            + u16(self.name_alg)
            + u32(self.attributes)
            + len2(self.auth_policy)
            + len2(self.public_key)
        )

    @classmethod
    def decode(cls, data: bytes) -> "KeyPublic":
        if len(data) < 10:
            raise ValueError("truncated key public area")
        type_alg = int.from_bytes(data[0:2], "big")
        name_alg = int.from_bytes(data[2:4], "big")
        attributes = int.from_bytes(data[4:8], "big")
        policy, public_key = unpack_fields(data[8:])
        return cls(attributes, policy, public_key, type_alg, name_alg)

    @property
    def name(self) -> bytes:
        return crypto.compute_name(self.encode())


@dataclass(frozen=True)
class NvTemplate:
    attributes: int = NVPCR_ATTRS
    data_size: int = 32


@dataclass(frozen=True)
class NvPublic:
    index: int
    attributes: int
    auth_policy: bytes
    data_size: int = 32
    name_alg: int = ALG_SHA256

    def encode(self) -> bytes:
        return (
            u32(self.index)
            + u16(self.name_alg)
            + u32(self.attributes)
            + len2(self.auth_policy)
            + u16(self.data_size)
        )

    @property
    def name(self) -> bytes:
        return crypto.compute_name(self.encode())


def nv_name(index: int, template: NvTemplate, auth_policy: bytes, written: bool) -> bytes:
    """Name of an NV index as it would be reported by the TPM."""
    attrs = template.attributes | (NvAttr.WRITTEN if written else 0)
    return NvPublic(index, attrs, auth_policy, template.data_size).name


# ---------------------------------------------------------------------------
# Attestation structures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CreationCertInfo:
    signer_name: bytes
    obj_name: bytes
    creation_hash: bytes
    auth_policy: bytes
    object_attributes: int
    type_alg: int = ALG_ECC
    magic: int = TPM_GENERATED
    kind: int = Tag.ATTEST_CREATION

    def encode(self) -> bytes:
        return pack_fields([
            u32(self.magic), u16(self.kind), self.signer_name, self.obj_name,
            self.creation_hash, self.auth_policy, u32(self.object_attributes),
            u16(self.type_alg),
        ])


@dataclass(frozen=True)
class NvCertInfo:
    signer_name: bytes
    obj_name: bytes
    nv_contents: bytes
    offset: int = 0
    magic: int = TPM_GENERATED
    kind: int = Tag.ATTEST_NV

    def encode(self) -> bytes:
        return pack_fields([
            u32(self.magic), u16(self.kind), self.signer_name, self.obj_name,
            u16(self.offset), self.nv_contents,
        ])


@dataclass(frozen=True)
class AuditInfo:
    signer_name: bytes
    h_session: bytes
    magic: int = TPM_GENERATED
    kind: int = Tag.ATTEST_SESSION_AUDIT

    def encode(self) -> bytes:
        return pack_fields([u32(self.magic), u16(self.kind), self.signer_name, self.h_session])


def decode_attest(data: bytes):
    """Parse any attestation blob produced by :class:`VTpm`.

    Raises ValueError on anything that does not parse.
    """
    fields = unpack_fields(data)
    if len(fields) < 2 or len(fields[0]) != 4 or len(fields[1]) != 2:
        raise ValueError("malformed attestation header")
    magic = int.from_bytes(fields[0], "big")
    kind = int.from_bytes(fields[1], "big")
    rest = fields[2:]
    if kind == Tag.ATTEST_CREATION and len(rest) == 6:
        signer, obj, creation, policy, attrs, type_alg = rest
        return CreationCertInfo(signer, obj, creation, policy, int.from_bytes(attrs, "big"),
                                int.from_bytes(type_alg, "big"), magic, kind)
    if kind == Tag.ATTEST_NV and len(rest) == 4:
        signer, obj, offset, contents = rest
        return NvCertInfo(signer, obj, contents, int.from_bytes(offset, "big"), magic, kind)
    if kind == Tag.ATTEST_SESSION_AUDIT and len(rest) == 2:
        signer, h_session = rest
        return AuditInfo(signer, h_session, magic, kind)
    raise ValueError(f"unknown attestation structure 0x{kind:04x}")


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ticket:
    tag: int
    value: bytes

    def to_bytes(self) -> bytes:
        return u16(self.tag) + self.value

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ticket":
        if len(data) != 2 + crypto.DIGEST_SIZE:
            raise ValueError("malformed ticket")
        return cls(int.from_bytes(data[:2], "big"), bytes(data[2:]))


@dataclass(frozen=True)
class ObjectBlob:
    """Output of TPM2_Create: the public area plus the parent-sealed secret."""

    public: bytes
    sealed: bytes
    integrity: bytes


@dataclass
class LoadedObject:
    kind: str  # storage | endorsement | attestation | external
    public: KeyPublic
    secret: Optional[SigningKeyPair] = None
    storage_seed: Optional[bytes] = None

    @property
    def name(self) -> bytes:
        return self.public.name

    @property
    def auth_policy(self) -> bytes:
        return self.public.auth_policy

    @property
    def attributes(self) -> int:
        return self.public.attributes


@dataclass
class NvIndex:
    handle: int
    template: NvTemplate
    auth_policy: bytes
    value: bytes = ZERO_DIGEST
    written: bool = False

    @property
    def public(self) -> NvPublic:
        attrs = self.template.attributes | (NvAttr.WRITTEN if self.written else 0)
        return NvPublic(self.handle, attrs, self.auth_policy, self.template.data_size)

    @property
    def name(self) -> bytes:
        return self.public.name


@dataclass
class Session:
    handle: int
    kind: str  # POLICY | HMAC
    nonce_tpm: bytes
    policy_digest: bytes = ZERO_DIGEST
    audit_digest: bytes = ZERO_DIGEST
    cp_hash: Optional[bytes] = None
    command_locked: Optional[int] = None


def witness(audit: bytes, cc: int, handle_names: Sequence[bytes], params: bytes,
            rc: int = RC_SUCCESS, rparams: bytes = b"") -> bytes:
    """Fold one executed command into an audit digest."""
    cp_hash = sha256(enc_cc(cc) + b"".join(handle_names) + params)
    rp_hash = sha256(u32(rc) + enc_cc(cc) + rparams)
    return sha256(audit + cp_hash + rp_hash)


def _command(name: str):
    """Mark a public TPM command; lets a profiler time each invocation."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(self, *args, **kwargs):
            if self.profiler is None:
                return fn(self, *args, **kwargs)
            start = time.perf_counter_ns()
            try:
                return fn(self, *args, **kwargs)
            finally:
                self.profiler(name, time.perf_counter_ns() - start)

        return inner

    return wrap


def _seed_bytes(seed) -> bytes:
    if isinstance(seed, (bytes, bytearray)):
        return bytes(seed)
    return str(seed).encode()


class VTpm:
    """One party's virtual TPM.

    A single instance is single-owner: commands execute serially against it.
    """

    def __init__(self, seed=0, profiler: Optional[Callable[[str, int], None]] = None):
        self._rng = random.Random(sha256(b"vtpm-rng" + _seed_bytes(seed)))
        self._pps = self._rng.randbytes(32)
        self._hierarchy_proof = self._rng.randbytes(32)
        self.pcrs: list[bytes] = [ZERO_DIGEST] * PCR_COUNT
        self.nv_store: dict[int, NvIndex] = {}
        self.objects: dict[int, LoadedObject] = {}
        self.persistent: dict[int, LoadedObject] = {}
        self.sessions: dict[int, Session] = {}
        self.clock = 0
        self._next_transient = TRANSIENT_FIRST
        self._next_persistent = PERSISTENT_FIRST
        self._next_session = 0
        self.profiler = profiler

    # -- secrets ------------------------------------------------------------

    def secret_material(self) -> list[bytes]:
        """Every secret held by this TPM, for leak scanning in tests."""
        out = [self._pps, self._hierarchy_proof]
        for obj in list(self.objects.values()) + list(self.persistent.values()):
            if obj.secret is not None:
                out.append(obj.secret.secret)
            if obj.storage_seed is not None:
                out.append(obj.storage_seed)
        return out

    def _ticket(self, tag: int, *parts: bytes) -> Ticket:
        return Ticket(tag, hmac_sha256(self._hierarchy_proof, u16(tag) + b"".join(parts)))

    # -- handles ------------------------------------------------------------

    def _object(self, handle: int) -> LoadedObject:
        obj = self.objects.get(handle) or self.persistent.get(handle)
        if obj is None:
            raise TpmError("unknown-handle", f"0x{handle:08x}")
        return obj

    def _nv(self, idx: int) -> NvIndex:
        nv = self.nv_store.get(idx)
        if nv is None:
            raise TpmError("nv-undefined", f"0x{idx:08x}")
        return nv

    def _session(self, handle: int, kind: Optional[str] = None) -> Session:
        sess = self.sessions.get(handle)
        if sess is None:
            raise TpmError("unknown-handle", f"session 0x{handle:08x}")
        if kind is not None and sess.kind != kind:
            raise TpmError("wrong-session-kind", f"expected {kind}, got {sess.kind}")
        return sess

    def _add_transient(self, obj: LoadedObject) -> int:
        handle = self._next_transient
        self._next_transient += 1
        self.objects[handle] = obj
        return handle

    def name_of(self, handle: int) -> bytes:
        if NV_INDEX_FIRST <= handle <= NV_INDEX_LAST:
            return self._nv(handle).name
        return self._object(handle).name

    def public_of(self, handle: int) -> bytes:
        return self._object(handle).public.encode()

    # -- provisioning -------------------------------------------------------

    def create_primary(self, kind: str) -> int:
        """Derive a primary key from the platform seed (storage or endorsement)."""
        if kind == "storage":
            attrs = STORAGE_KEY_ATTRS
        elif kind == "endorsement":
            attrs = ENDORSEMENT_KEY_ATTRS
        else:
            raise TpmError("bad-template", kind)
        key = SigningKeyPair.from_seed(hmac_sha256(self._pps, b"primary:" + kind.encode()))
        seed = hmac_sha256(self._pps, b"storage-seed:" + kind.encode()) if kind == "storage" else None
        obj = LoadedObject(kind, KeyPublic(attrs, ZERO_DIGEST, key.public), key, seed)
        return self._add_transient(obj)

    @_command("TPM2_LoadExternal")
    def load_external(self, public: bytes) -> tuple[int, bytes]:
        try:
            pub = KeyPublic.decode(public)
        except ValueError as exc:
            raise TpmError("bad-public", str(exc)) from exc
        handle = self._add_transient(LoadedObject("external", pub))
        return handle, pub.name

    # -- sessions -----------------------------------------------------------

    @_command("TPM2_StartAuthSession")
    def start_auth_session(self, kind: str) -> tuple[int, bytes]:
        if kind not in ("POLICY", "HMAC"):
            raise TpmError("bad-session-kind", kind)
        if len(self.sessions) >= MAX_SESSIONS:
            raise TpmError("session-slots-exhausted")
        base = POLICY_SESSION_FIRST if kind == "POLICY" else HMAC_SESSION_FIRST
        handle = base + self._next_session
        self._next_session += 1
        nonce = self._rng.randbytes(NONCE_SIZE)
        self.sessions[handle] = Session(handle, kind, nonce)
        return handle, nonce

    @_command("TPM2_FlushContext")
    def flush_context(self, handle: int) -> None:
        if handle in self.sessions:
            del self.sessions[handle]
        elif handle in self.objects:
            del self.objects[handle]
        else:
            raise TpmError("unknown-handle", f"0x{handle:08x}")

    def session_state(self, handle: int) -> Session:
        """Read-only copy of a session (what a debugger would show)."""
        return replace(self._session(handle))

    # -- PCRs ---------------------------------------------------------------

    @_command("TPM2_PCR_Extend")
    def pcr_extend(self, idx: int, digest: bytes, audit_session: Optional[int] = None) -> None:
        if not 0 <= idx < PCR_COUNT:
            raise TpmError("bad-index", str(idx))
        digest = check_digest(digest)
        sess = self._session(audit_session, "HMAC") if audit_session is not None else None
        self.pcrs[idx] = crypto.extend(self.pcrs[idx], digest)
        if sess is not None:
            handle = enc_pcr_index(idx)
            sess.audit_digest = witness(sess.audit_digest, CommandCode.PCR_Extend,
                                        [handle, handle], u16(ALG_SHA256) + digest)

    def pcr_read(self, idx: int) -> bytes:
        if not 0 <= idx < PCR_COUNT:
            raise TpmError("bad-index", str(idx))
        return self.pcrs[idx]

    # -- NV -----------------------------------------------------------------

    @_command("TPM2_NV_DefineSpace")
    def nv_define_space(self, idx: int, template: NvTemplate, auth_policy: bytes) -> None:
        if not NV_INDEX_FIRST <= idx <= NV_INDEX_LAST:
            raise TpmError("bad-index", f"0x{idx:08x}")
        if idx in self.nv_store:
            raise TpmError("index-collision", f"0x{idx:08x}")
        self.nv_store[idx] = NvIndex(idx, template, check_digest(auth_policy))

    @_command("TPM2_NV_Extend")
    def nv_extend(self, idx: int, digest: bytes, audit_session: Optional[int] = None) -> None:
        nv = self._nv(idx)
        digest = check_digest(digest)
        sess = self._session(audit_session, "HMAC") if audit_session is not None else None
        # cpHash covers the name as it was when the command was issued
        name = nv.name
        nv.value = crypto.extend(nv.value if nv.written else ZERO_DIGEST, digest)
        nv.written = True
        if sess is not None:
            sess.audit_digest = witness(sess.audit_digest, CommandCode.NV_Extend,
                                        [name, name], len2(digest))

    @_command("TPM2_NV_Read")
    def nv_read(self, idx: int) -> bytes:
        nv = self._nv(idx)
        if not nv.written:
            raise TpmError("nv-unwritten", f"0x{idx:08x}")
        return nv.value

    @_command("TPM2_NV_Certify")
    def nv_certify(self, idx: int, ek: int) -> tuple[bytes, bytes]:
        nv = self._nv(idx)
        if not nv.written:
            raise TpmError("nv-unwritten", f"0x{idx:08x}")
        signer = self._signing_object(ek)
        info = NvCertInfo(signer.name, nv.name, nv.value).encode()
        return info, signer.secret.sign(info)

    @_command("TPM2_NV_UndefineSpaceSpecial")
    def nv_undefine_space_special(self, idx: int, session: int) -> None:
        nv = self._nv(idx)
        sess = self.sessions.get(session)
        if sess is None:
            raise TpmError("unknown-handle", f"session 0x{session:08x}")
        if sess.kind != "POLICY" or not nv.template.attributes & NvAttr.POLICY_DELETE:
            raise TpmError("policy-unsatisfied", "deletion needs a policy session")
        if sess.command_locked != CommandCode.NV_UndefineSpaceSpecial:
            raise TpmError("command-code-mismatch")
        expected_cp = sha256(enc_cc(CommandCode.NV_UndefineSpaceSpecial) + nv.name + u32(RH_PLATFORM))
        if sess.cp_hash != expected_cp:
            raise TpmError("cp-hash-mismatch")
        if sess.policy_digest != nv.auth_policy:
            raise TpmError("policy-unsatisfied")
        del self.nv_store[idx]
        del self.sessions[session]

    # -- objects ------------------------------------------------------------

    def _signing_object(self, handle: int) -> LoadedObject:
        obj = self._object(handle)
        if obj.secret is None or not obj.attributes & ObjectAttr.SIGN:
            raise TpmError("not-a-signing-key", f"0x{handle:08x}")
        return obj

    def _storage_object(self, handle: int) -> LoadedObject:
        try:
            obj = self._object(handle)
        except TpmError:
            raise TpmError("bad-parent", f"0x{handle:08x}") from None
        if obj.storage_seed is None:
            raise TpmError("bad-parent", f"0x{handle:08x} is not a storage key")
        return obj

    @staticmethod
    def _seal(parent: LoadedObject, public: bytes, secret: bytes) -> tuple[bytes, bytes]:
        name = crypto.compute_name(public)
        pad = hmac_sha256(parent.storage_seed, b"STORAGE" + name)
        sealed = bytes(a ^ b for a, b in zip(secret, pad))
        integrity = hmac_sha256(hmac_sha256(parent.storage_seed, b"INTEGRITY"), sealed + name)
        return sealed, integrity

    @_command("TPM2_Create")
    def create(self, parent: int, attributes: int, auth_policy: bytes) -> tuple[ObjectBlob, bytes, Ticket]:
        parent_obj = self._storage_object(parent)
        auth_policy = check_digest(auth_policy)
        key = SigningKeyPair.from_seed(self._rng.randbytes(32))
        public = KeyPublic(attributes, auth_policy, key.public).encode()
        sealed, integrity = self._seal(parent_obj, public, key.secret)
        self.clock += 1
        creation_hash = sha256(parent_obj.name + u32(attributes) + u32(self.clock))
        name = crypto.compute_name(public)
        ticket = self._ticket(Tag.CREATION, name, creation_hash)
        return ObjectBlob(public, sealed, integrity), creation_hash, ticket

    @_command("TPM2_Load")
    def load(self, parent: int, blob: ObjectBlob) -> tuple[int, bytes]:
        parent_obj = self._storage_object(parent)
        name = crypto.compute_name(blob.public)
        pad = hmac_sha256(parent_obj.storage_seed, b"STORAGE" + name)
        expected = hmac_sha256(hmac_sha256(parent_obj.storage_seed, b"INTEGRITY"), blob.sealed + name)
        if not hmac.compare_digest(expected, blob.integrity):
            raise TpmError("wrong-parent", "integrity check failed")
        scalar = int.from_bytes(bytes(a ^ b for a, b in zip(blob.sealed, pad)), "big")
        pub = KeyPublic.decode(blob.public)
        key = SigningKeyPair.from_scalar(scalar)
        if key.public != pub.public_key:
            raise TpmError("wrong-parent", "unsealed key does not match public area")
        handle = self._add_transient(LoadedObject("attestation", pub, key))
        return handle, pub.name

    @_command("TPM2_EvictControl")
    def evict_control(self, handle: int, persistent: Optional[int] = None) -> int:
        obj = self.objects.get(handle)
        if obj is None:
            raise TpmError("unknown-handle", f"0x{handle:08x}")
        if persistent is None:
            persistent = self._next_persistent
            self._next_persistent += 1
        if persistent in self.persistent:
            raise TpmError("index-collision", f"0x{persistent:08x}")
        self.persistent[persistent] = obj
        return persistent

    @_command("TPM2_CertifyCreation")
    def certify_creation(self, obj: int, ek: int, creation_hash: bytes, ticket: Ticket) -> tuple[bytes, bytes]:
        target = self._object(obj)
        signer = self._signing_object(ek)
        expected = self._ticket(Tag.CREATION, target.name, creation_hash)
        if ticket.tag != Tag.CREATION or not hmac.compare_digest(expected.value, ticket.value):
            raise TpmError("ticket-mismatch")
        info = CreationCertInfo(
            signer.name, target.name, creation_hash, target.auth_policy,
            target.attributes, target.public.type_alg,
        ).encode()
        return info, signer.secret.sign(info)

    @_command("TPM2_VerifySignature")
    def verify_signature(self, key: int, digest: bytes, signature: bytes) -> Ticket:
        obj = self._object(key)
        if not crypto.verify(obj.public.public_key, digest, signature):
            raise TpmError("bad-signature")
        return self._ticket(Tag.VERIFIED, check_digest(digest), obj.name)

    @_command("TPM2_Sign")
    def sign(self, key: int, message: bytes, session: Optional[int] = None) -> bytes:
        obj = self._signing_object(key)
        if obj.attributes & ObjectAttr.RESTRICTED:
            raise TpmError("restricted-key-refusal", "restricted keys only sign TPM-generated data")
        needs_policy = obj.auth_policy != ZERO_DIGEST or not obj.attributes & ObjectAttr.USER_WITH_AUTH
        if needs_policy:
            sess = self.sessions.get(session) if session is not None else None
            if sess is None or sess.kind != "POLICY":
                raise TpmError("policy-unsatisfied", "no policy session")
            if sess.command_locked not in (None, CommandCode.Sign):
                raise TpmError("policy-unsatisfied", "session locked to another command")
            if sess.policy_digest != obj.auth_policy:
                raise TpmError("policy-unsatisfied", "policy digest does not match authPolicy")
            del self.sessions[session]
        return obj.secret.sign(message)

    @_command("TPM2_GetSessionAuditDigest")
    def get_session_audit_digest(self, ek: int, session: int) -> tuple[bytes, bytes]:
        sess = self._session(session)
        if sess.kind != "HMAC":
            raise TpmError("wrong-session-kind", "audit needs an HMAC session")
        signer = self._signing_object(ek)
        info = AuditInfo(signer.name, sess.audit_digest).encode()
        return info, signer.secret.sign(info)

    # -- policy commands ----------------------------------------------------

    @_command("TPM2_PolicyNV")
    def policy_nv(self, session: int, idx: int, expected: bytes) -> None:
        sess = self._session(session, "POLICY")
        nv = self._nv(idx)
        if not nv.written:
            raise TpmError("nv-unwritten", f"0x{idx:08x}")
        if nv.value != expected:
            raise TpmError("nv-mismatch", f"0x{idx:08x}")
        args = sha256(expected + u16(0) + u16(0))
        sess.policy_digest = sha256(sess.policy_digest + enc_cc(CommandCode.PolicyNV) + args + nv.name)

    @_command("TPM2_PolicyPCR")
    def policy_pcr(self, session: int, selection: Sequence[int]) -> None:
        sess = self._session(session, "POLICY")
        selection = list(selection)
        if not selection or any(not 0 <= i < PCR_COUNT for i in selection):
            raise TpmError("bad-selection", str(selection))
        if any(a >= b for a, b in zip(selection, selection[1:])):
            raise TpmError("bad-selection", "indices must be strictly ascending")
        h_pcrs = b"".join(self.pcrs[i] for i in selection)
        sess.policy_digest = sha256(
            sess.policy_digest + enc_cc(CommandCode.PolicyPCR) + enc_pcr_selection(selection) + sha256(h_pcrs)
        )

    @_command("TPM2_PolicySigned")
    def policy_signed(self, session: int, key: int, signature: bytes, cp_hash: bytes,
                      expiration: int = 0) -> None:
        sess = self._session(session, "POLICY")
        obj = self._object(key)
        a_hash = sha256(sess.nonce_tpm + u32(expiration) + cp_hash)
        if not crypto.verify(obj.public.public_key, a_hash, signature):
            raise TpmError("bad-signature", "authorization not signed over this session's nonce")
        if sess.cp_hash is not None and sess.cp_hash != cp_hash:
            raise TpmError("cp-hash-mismatch", "session already bound to another cpHash")
        step = sha256(sess.policy_digest + enc_cc(CommandCode.PolicySigned) + obj.name)
        sess.policy_digest = sha256(step)
        sess.cp_hash = cp_hash

    @_command("TPM2_PolicyCommandCode")
    def policy_command_code(self, session: int, cc: int) -> None:
        sess = self._session(session, "POLICY")
        if sess.command_locked is not None and sess.command_locked != cc:
            raise TpmError("command-code-mismatch")
        sess.command_locked = int(cc)
        sess.policy_digest = sha256(sess.policy_digest + enc_cc(CommandCode.PolicyCommandCode) + enc_cc(cc))

    @_command("TPM2_PolicyAuthorize")
    def policy_authorize(self, session: int, approved_policy: bytes, ticket: Ticket,
                         signer_name: bytes) -> None:
        sess = self._session(session, "POLICY")
        if sess.policy_digest != approved_policy:
            raise TpmError("policy-mismatch")
        expected = self._ticket(Tag.VERIFIED, sha256(approved_policy), signer_name)
        if ticket.tag != Tag.VERIFIED or not hmac.compare_digest(expected.value, ticket.value):
            raise TpmError("ticket-mismatch")
        # empty policyRef: the step is hashed twice
        step = sha256(ZERO_DIGEST + enc_cc(CommandCode.PolicyAuthorize) + signer_name)
        sess.policy_digest = sha256(step)

    # -- debugging ----------------------------------------------------------

    def dump(self) -> dict:
        """JSON-friendly state with every secret left out."""
        return {
            "pcrs": {str(i): v.hex() for i, v in enumerate(self.pcrs) if v != ZERO_DIGEST},
            "nv": {
                f"0x{h:08x}": {"written": nv.written, "value": nv.value.hex() if nv.written else None,
                               "name": nv.name.hex()}
                for h, nv in sorted(self.nv_store.items())
            },
            "persistent": {f"0x{h:08x}": obj.name.hex() for h, obj in sorted(self.persistent.items())},
            "sessions": sorted(f"0x{h:08x}" for h in self.sessions),
        }
