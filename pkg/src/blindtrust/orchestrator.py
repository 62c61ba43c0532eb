"""The trusted orchestrator.

It enrolls VFs, keeps mock copies of every VF's PCR and NV PCR values,
composes and signs the attestation policies those values imply, checks
audit digests after each supervised update and authorizes NV PCR deletion.

The policy arithmetic lives in module-level functions so that tests and the
VF side can use exactly the same definitions.
"""

from __future__ import annotations

import copy
import logging
import random
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .crypto import (
    RC_SUCCESS,
    RH_PLATFORM,
    TPM_GENERATED,
    ZERO_DIGEST,
    CommandCode,
    HmacKey,
    SigningKeyPair,
    enc_cc,
    enc_pcr_index,
    enc_pcr_selection,
    sha256,
    u16,
    u32,
)
from .messages import (
    AkCreationRequest,
    AttachRequest,
    Advertisement,
    DeletionGrant,
    DetachRequest,
    Revocation,
    UpdateRequest,
    advertisement_bytes,
    revocation_bytes,
)
from .vtpm import (
    ATTESTATION_KEY_ATTRS,
    ENDORSEMENT_KEY_ATTRS,
    NVPCR_ATTRS,
    AuditInfo,
    CreationCertInfo,
    KeyPublic,
    NvCertInfo,
    NvTemplate,
    decode_attest,
    nv_name,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Policy arithmetic
# ---------------------------------------------------------------------------


def authorize_policy(signer_name: bytes) -> bytes:
    """Flexible policy bound to ``signer_name`` (PolicyAuthorize, empty policyRef)."""
    return sha256(sha256(ZERO_DIGEST + enc_cc(CommandCode.PolicyAuthorize) + signer_name))


def nv_deletion_policy(signer_name: bytes) -> bytes:
    """authPolicy of an NV PCR: authorized by ``signer_name`` and locked to undefine."""
    return sha256(
        authorize_policy(signer_name)
        + enc_cc(CommandCode.PolicyCommandCode)
        + enc_cc(CommandCode.NV_UndefineSpaceSpecial)
    )


def policy_signed_policy(signer_name: bytes) -> bytes:
    return sha256(sha256(ZERO_DIGEST + enc_cc(CommandCode.PolicySigned) + signer_name))


def policy_nv_step(h_pol: bytes, value: bytes, name: bytes) -> bytes:
    args = sha256(value + u16(0) + u16(0))
    return sha256(h_pol + enc_cc(CommandCode.PolicyNV) + args + name)


def policy_pcr_step(h_pol: bytes, indices: list[int], values: list[bytes]) -> bytes:
    return sha256(
        h_pol + enc_cc(CommandCode.PolicyPCR) + enc_pcr_selection(indices) + sha256(b"".join(values))
    )


@dataclass
class MockNvEntry:
    handle: int
    value: bytes
    name: bytes


@dataclass
class MockState:
    """mPCR (index -> value) and mNVPCR (attach-ordered entries) of one VF."""

    pcrs: dict[int, bytes] = field(default_factory=dict)
    nvpcrs: list[MockNvEntry] = field(default_factory=list)

    def nv(self, handle: int) -> Optional[MockNvEntry]:
        for entry in self.nvpcrs:
            if entry.handle == handle:
                return entry
        return None

    def has(self, idx: int, is_nv: bool) -> bool:
        return self.nv(idx) is not None if is_nv else idx in self.pcrs

    def keys(self) -> set[tuple[bool, int]]:
        return {(True, e.handle) for e in self.nvpcrs} | {(False, i) for i in self.pcrs}

    def values(self) -> dict[tuple[bool, int], bytes]:
        out = {(False, i): v for i, v in self.pcrs.items()}
        out.update({(True, e.handle): e.value for e in self.nvpcrs})
        return out

    def fold(self, idx: int, is_nv: bool, h_update: bytes) -> None:
        if is_nv:
            entry = self.nv(idx)
            entry.value = crypto.extend(entry.value, h_update)
        else:
            self.pcrs[idx] = crypto.extend(self.pcrs[idx], h_update)

    def to_json(self) -> dict:
        return {
            "pcrs": {str(i): v.hex() for i, v in sorted(self.pcrs.items())},
            "nvpcrs": [{"handle": f"0x{e.handle:08x}", "value": e.value.hex(), "name": e.name.hex()}
                       for e in self.nvpcrs],
        }


def compose_policy(mock: MockState) -> bytes:
    """Policy digest a VF's live session must reach for ``mock``.

    NV PCRs first (one PolicyNV each, attach order), then all normal PCRs in
    a single ascending PolicyPCR.
    """
    h_pol = ZERO_DIGEST
    for entry in mock.nvpcrs:
        h_pol = policy_nv_step(h_pol, entry.value, entry.name)
    if mock.pcrs:
        indices = sorted(mock.pcrs)
        h_pol = policy_pcr_step(h_pol, indices, [mock.pcrs[i] for i in indices])
    return h_pol


def expected_audit_digest(idx: int, is_nv: bool, h_update: bytes, nv_entry_name: bytes = b"") -> bytes:
    """Audit digest of a fresh HMAC session after one audited extend."""
    if is_nv:
        cp_hash = sha256(enc_cc(CommandCode.NV_Extend) + nv_entry_name + nv_entry_name
                         + crypto.len2(h_update))
        rp_hash = sha256(u32(RC_SUCCESS) + enc_cc(CommandCode.NV_Extend))
    else:
        handle = enc_pcr_index(idx)
        cp_hash = sha256(enc_cc(CommandCode.PCR_Extend) + handle + handle
                         + u16(crypto.ALG_SHA256) + h_update)
        rp_hash = sha256(u32(RC_SUCCESS) + enc_cc(CommandCode.PCR_Extend))
    return sha256(ZERO_DIGEST + cp_hash + rp_hash)


def deletion_cp_hash(nv_entry_name: bytes) -> bytes:
    return sha256(enc_cc(CommandCode.NV_UndefineSpaceSpecial) + nv_entry_name + u32(RH_PLATFORM))


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


class OrchestratorError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class PendingUpdate:
    idx: int
    is_nv: bool
    h_update: bytes
    h_pol: bytes
    mock_after: MockState


@dataclass
class VfRecord:
    vf_id: str
    ek_public: bytes  # encoded public area
    hk: HmacKey
    chain: str = "default"
    reference: dict[str, bytes] = field(default_factory=dict)  # fqpn -> traced bytes
    ak_public: Optional[bytes] = None
    ak_signature: Optional[bytes] = None
    ak_serial: int = 0
    mock: MockState = field(default_factory=MockState)
    last_policy: Optional[tuple[bytes, bytes]] = None
    last_policy_keys: set = field(default_factory=set)
    last_authorized: Optional[MockState] = None
    pending_enrollment: Optional[AkCreationRequest] = None
    pending_update: Optional[PendingUpdate] = None
    pending_attach: dict[int, AttachRequest] = field(default_factory=dict)
    pending_poison: dict[int, bytes] = field(default_factory=dict)
    pending_nv_detach: set = field(default_factory=set)
    failed_audits: int = 0

    @property
    def ek_key(self) -> bytes:
        return KeyPublic.decode(self.ek_public).public_key

    def to_json(self) -> dict:
        return {
            "vf_id": self.vf_id,
            "chain": self.chain,
            "ek_name": KeyPublic.decode(self.ek_public).name.hex(),
            "ak_public": self.ak_public.hex() if self.ak_public else None,
            "hk": "<redacted>",
            "mock": self.mock.to_json(),
            "last_policy": self.last_policy[0].hex() if self.last_policy else None,
        }


@dataclass
class ServiceGraph:
    chains: dict[str, list[str]] = field(default_factory=dict)
    directory: dict[str, tuple[bytes, bytes]] = field(default_factory=dict)


class Orchestrator:
    def __init__(self, seed=0, supersession: bool = True):
        seed_bytes = seed if isinstance(seed, bytes) else str(seed).encode()
        self._ek = SigningKeyPair.from_seed(b"orchestrator-ek" + seed_bytes)
        self.ek_public_area = KeyPublic(ENDORSEMENT_KEY_ATTRS, ZERO_DIGEST, self._ek.public).encode()
        self.ek_name = crypto.compute_name(self.ek_public_area)
        self._rng = random.Random(sha256(b"orchestrator-rng" + seed_bytes))
        self.records: dict[str, VfRecord] = {}
        self.graph = ServiceGraph()
        self.supersession = supersession
        self._serial = 0

    def secret_material(self) -> list[bytes]:
        return [self._ek.secret] + [r.hk.key for r in self.records.values()]

    def _next_serial(self) -> int:
        self._serial += 1
        return self._serial

    def _sign(self, message: bytes) -> bytes:
        return self._ek.sign(message)

    def _record(self, vf_id: str) -> VfRecord:
        rec = self.records.get(vf_id)
        if rec is None:
            raise OrchestratorError("unknown-vf", vf_id)
        return rec

    # -- registration / enrollment -----------------------------------------

    def register_vf(self, vf_id: str, ek_public: bytes, hk: HmacKey, chain: str = "default") -> VfRecord:
        rec = VfRecord(vf_id, ek_public, hk, chain)
        self.records[vf_id] = rec
        self.graph.chains.setdefault(chain, []).append(vf_id)
        return rec

    def set_reference(self, vf_id: str, fqpn: str, traced: bytes) -> None:
        """Record the expected traced bytes (content and metadata) of a VF file."""
        self._record(vf_id).reference[fqpn] = traced

    def begin_enrollment(self, vf_id: str) -> AkCreationRequest:
        rec = self._record(vf_id)
        req = AkCreationRequest(ATTESTATION_KEY_ATTRS, authorize_policy(self.ek_name))
        rec.pending_enrollment = req
        return req

    def verify_ak_certificate(self, vf_id: str, cert_info: bytes, signature: bytes,
                              ak_public: bytes) -> Verdict:
        rec = self._record(vf_id)
        req = rec.pending_enrollment
        rec.pending_enrollment = None
        if req is None:
            return Verdict(False, "no-pending")
        try:
            info = decode_attest(cert_info)
            ak = KeyPublic.decode(ak_public)
        except ValueError:
            return Verdict(False, "malformed")
        if not isinstance(info, CreationCertInfo):
            return Verdict(False, "malformed")
        if crypto.compute_name(ak_public) != info.obj_name:
            return Verdict(False, "name")
        if info.magic != TPM_GENERATED:
            return Verdict(False, "magic")
        if ak.attributes != req.attributes or info.object_attributes != req.attributes:
            return Verdict(False, "template")
        if info.auth_policy != req.h_pol or ak.auth_policy != req.h_pol:
            return Verdict(False, "policy")
        if not crypto.verify(rec.ek_key, cert_info, signature):
            return Verdict(False, "signature")
        rec.ak_public = ak_public
        rec.ak_serial = self._next_serial()
        rec.ak_signature = self._sign(advertisement_bytes(vf_id, ak.public_key, rec.ak_serial))
        self.graph.directory[vf_id] = (ak.public_key, rec.ak_signature)
        return Verdict(True)

    def advertisement(self, vf_id: str) -> Advertisement:
        rec = self._record(vf_id)
        if rec.ak_public is None:
            raise OrchestratorError("not-enrolled", vf_id)
        return Advertisement(vf_id, KeyPublic.decode(rec.ak_public).public_key, rec.ak_serial, rec.ak_signature)

    def chain_peers(self, vf_id: str) -> list[str]:
        chain = self._record(vf_id).chain
        return [v for v in self.graph.chains.get(chain, []) if v != vf_id]

    def revoke(self, vf_id: str) -> Revocation:
        """Drop a VF's AK from the directory and sign a revocation notice."""
        rec = self._record(vf_id)
        self.graph.directory.pop(vf_id, None)
        rec.ak_public = None
        rec.ak_signature = None
        serial = self._next_serial()
        return Revocation(vf_id, serial, self._sign(revocation_bytes(vf_id, serial)))

    # -- supervised updates -------------------------------------------------

    def authenticate_measurement(self, vf_id: str, content: bytes) -> bytes:
        return self._record(vf_id).hk.mac(sha256(content))

    def _redirect(self, rec: VfRecord, idx: int, is_nv: bool) -> tuple[int, bool]:
        # An update must extend something the previous policy covers,
        # otherwise that policy stays satisfiable next to the new one.
        if not self.supersession or rec.last_policy is None:
            return idx, is_nv
        if (is_nv, idx) in rec.last_policy_keys:
            return idx, is_nv
        for entry in rec.mock.nvpcrs:
            if (True, entry.handle) in rec.last_policy_keys:
                log.info("%s: update of %s redirected to NV 0x%08x", rec.vf_id, idx, entry.handle)
                return entry.handle, True
        for i in sorted(rec.mock.pcrs):
            if (False, i) in rec.last_policy_keys:
                log.info("%s: update of %s redirected to PCR %d", rec.vf_id, idx, i)
                return i, False
        return idx, is_nv

    def compose_policy_update(self, vf_id: str, idx: int, is_nv: bool, h_update: bytes,
                              fqpn: str = "") -> UpdateRequest:
        rec = self._record(vf_id)
        idx, is_nv = self._redirect(rec, idx, is_nv)
        if not rec.mock.has(idx, is_nv):
            raise OrchestratorError("unknown-index", f"{'NV' if is_nv else 'PCR'} {idx}")
        mock_after = copy.deepcopy(rec.mock)
        mock_after.fold(idx, is_nv, h_update)
        h_pol = compose_policy(mock_after)
        h_pol_hash = sha256(h_pol)
        rec.pending_update = PendingUpdate(idx, is_nv, h_update, h_pol, mock_after)
        rec.last_policy = (h_pol, self._sign(h_pol_hash))
        rec.last_policy_keys = mock_after.keys()
        rec.last_authorized = copy.deepcopy(mock_after)
        return UpdateRequest(fqpn, idx, is_nv, h_pol, h_pol_hash, rec.last_policy[1])

    def request_update(self, vf_id: str, fqpn: str, idx: int, is_nv: bool) -> UpdateRequest:
        """Measure ``fqpn`` from the reference store and compose the update."""
        rec = self._record(vf_id)
        if fqpn not in rec.reference:
            raise OrchestratorError("unknown-path", fqpn)
        h_update = self.authenticate_measurement(vf_id, rec.reference[fqpn])
        return self.compose_policy_update(vf_id, idx, is_nv, h_update, fqpn)

    def verify_audit(self, vf_id: str, idx: int, is_nv: bool, h_update: bytes,
                     audit_info: bytes, signature: bytes) -> Verdict:
        rec = self._record(vf_id)
        pending = rec.pending_update
        if pending is None or (pending.idx, pending.is_nv, pending.h_update) != (idx, is_nv, h_update):
            return Verdict(False, "no-pending")
        rec.pending_update = None
        verdict = self._check_audit(rec, idx, is_nv, h_update, audit_info, signature)
        if verdict:
            rec.mock = pending.mock_after
        else:
            rec.failed_audits += 1
        return verdict

    def _check_audit(self, rec: VfRecord, idx: int, is_nv: bool, h_update: bytes,
                     audit_info: bytes, signature: bytes) -> Verdict:
        name = b""
        if is_nv:
            entry = rec.mock.nv(idx)
            if entry is None:
                return Verdict(False, "unknown-index")
            name = entry.name
        elif idx not in rec.mock.pcrs:
            return Verdict(False, "unknown-index")
        expected = expected_audit_digest(idx, is_nv, h_update, name)
        try:
            info = decode_attest(audit_info)
        except ValueError:
            return Verdict(False, "malformed")
        if not isinstance(info, AuditInfo) or info.magic != TPM_GENERATED:
            return Verdict(False, "magic")
        if info.h_session != expected:
            return Verdict(False, "audit-digest")
        if not crypto.verify(rec.ek_key, audit_info, signature):
            return Verdict(False, "signature")
        return Verdict(True)

    def handle_audit(self, vf_id: str, idx: int, is_nv: bool, audit_info: bytes, signature: bytes) -> Verdict:
        """Entry point for an incoming audit response (update or poison detach)."""
        rec = self._record(vf_id)
        if not is_nv and idx in rec.pending_poison:
            poison = rec.pending_poison.pop(idx)
            verdict = self._check_audit(rec, idx, False, poison, audit_info, signature)
            if verdict:
                del rec.mock.pcrs[idx]
            else:
                rec.failed_audits += 1
            return verdict
        pending = rec.pending_update
        if pending is None:
            return Verdict(False, "no-pending")
        if (pending.idx, pending.is_nv) != (idx, is_nv):
            # wrong index reported; fails and drops the pending update
            rec.pending_update = None
            rec.failed_audits += 1
            return Verdict(False, "index")
        return self.verify_audit(vf_id, idx, is_nv, pending.h_update, audit_info, signature)

    def expire_pending(self, vf_id: str) -> None:
        """Roll back anything still in flight (used when a round times out)."""
        rec = self._record(vf_id)
        rec.pending_update = None
        rec.pending_enrollment = None
        rec.pending_attach.clear()
        rec.pending_poison.clear()
        rec.pending_nv_detach.clear()

    # -- PCR administration -------------------------------------------------

    def request_pcr_attach(self, vf_id: str, idx: int, is_nv: bool, iv: bytes = ZERO_DIGEST) -> AttachRequest:
        rec = self._record(vf_id)
        if rec.mock.has(idx, is_nv) or (is_nv and idx in rec.pending_attach):
            raise OrchestratorError("index-in-use", f"{'NV' if is_nv else 'PCR'} {idx}")
        if not is_nv:
            rec.mock.pcrs[idx] = crypto.extend(ZERO_DIGEST, iv)
            return AttachRequest(idx, False, iv)
        req = AttachRequest(idx, True, iv, NVPCR_ATTRS, nv_deletion_policy(self.ek_name))
        rec.pending_attach[idx] = req
        return req

    def verify_nvpcr_certificate(self, vf_id: str, cert_info: bytes, signature: bytes) -> Verdict:
        rec = self._record(vf_id)
        try:
            info = decode_attest(cert_info)
        except ValueError:
            return Verdict(False, "malformed")
        if not isinstance(info, NvCertInfo):
            return Verdict(False, "malformed")
        req = None
        for idx, candidate in rec.pending_attach.items():
            expected = nv_name(idx, NvTemplate(candidate.nv_attributes), candidate.h_pol, written=True)
            if info.obj_name == expected:
                req = candidate
                break
        if req is None:
            rec.pending_attach.clear()
            return Verdict(False, "name")
        del rec.pending_attach[req.idx]
        if info.magic != TPM_GENERATED:
            return Verdict(False, "magic")
        if info.nv_contents != crypto.extend(ZERO_DIGEST, req.iv):
            return Verdict(False, "contents")
        if not crypto.verify(rec.ek_key, cert_info, signature):
            return Verdict(False, "signature")
        rec.mock.nvpcrs.append(MockNvEntry(req.idx, info.nv_contents, info.obj_name))
        return Verdict(True)

    def request_pcr_detach(self, vf_id: str, idx: int, is_nv: bool = False) -> DetachRequest:
        rec = self._record(vf_id)
        if not rec.mock.has(idx, is_nv):
            raise OrchestratorError("unknown-index", f"{'NV' if is_nv else 'PCR'} {idx}")
        if is_nv:
            # mock entry goes away once the deletion grant is minted
            rec.pending_nv_detach.add(idx)
            return DetachRequest(idx, True)
        if self.supersession and (False, idx) in rec.last_policy_keys:
            poison = self._rng.randbytes(32)
            rec.pending_poison[idx] = poison
            return DetachRequest(idx, False, poison)
        del rec.mock.pcrs[idx]
        return DetachRequest(idx, False)

    def authorize_nv_deletion(self, vf_id: str, idx: int, nonce: bytes, session: int = 0) -> DeletionGrant:
        rec = self._record(vf_id)
        entry = rec.mock.nv(idx)
        if entry is None or idx not in rec.pending_nv_detach:
            raise OrchestratorError("no-pending", f"NV 0x{idx:08x}")
        rec.pending_nv_detach.discard(idx)
        h_pol = policy_signed_policy(self.ek_name)
        h_pol_hash = sha256(h_pol)
        h_pol_signature = self._sign(h_pol_hash)
        h_cp = deletion_cp_hash(entry.name)
        a_hash = sha256(nonce + u32(0) + h_cp)
        a_hash_signature = self._sign(a_hash)
        rec.mock.nvpcrs.remove(entry)
        return DeletionGrant(idx, session, h_cp, a_hash_signature, h_pol, h_pol_hash, h_pol_signature)

    # -- views --------------------------------------------------------------

    def acceptable_states(self, vf_id: str) -> list[dict]:
        """States a VF may attest to: the committed mock and the latest authorization."""
        rec = self._record(vf_id)
        states = [rec.mock.values()]
        if rec.last_authorized is not None:
            states.append(rec.last_authorized.values())
        return states

    def export(self) -> dict:
        return {
            "ek_name": self.ek_name.hex(),
            "records": [self.records[v].to_json() for v in sorted(self.records)],
            "directory": {v: ak.hex() for v, (ak, _) in sorted(self.graph.directory.items())},
        }
