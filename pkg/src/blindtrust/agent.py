"""The VF side: tracer, measurement agent and the VF half of every protocol.

A :class:`VirtualFunction` owns one :class:`~blindtrust.vtpm.VTpm`.  It keeps
two local lists next to the TPM: ``pcrs`` (attached normal PCR indices) and
``nvpcrs`` (attached NV PCRs with the value the agent expects them to hold,
in attach order).  Both orders are part of the policy contract.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import crypto
from .crypto import ZERO_DIGEST, CommandCode, HmacKey, sha256, u32
from .messages import (
    AkCertificateResponse,
    AkCreationRequest,
    Advertisement,
    AttachRequest,
    AuditResponse,
    Challenge,
    ChallengeResponse,
    DeletionGrant,
    DetachRequest,
    NvCertResponse,
    Revocation,
    SessionNonce,
    UpdateRequest,
    advertisement_bytes,
    revocation_bytes,
)
from .vtpm import NONCE_SIZE, KeyPublic, NvTemplate, Ticket, TpmError, VTpm

CHALLENGE_DEADLINE = 10  # ticks


class AgentError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


class AttestationFailed(AgentError):
    def __init__(self, detail: str = ""):
        super().__init__("attestation-failed", detail)


# ---------------------------------------------------------------------------
# Tracer
# ---------------------------------------------------------------------------


@dataclass
class FileEntry:
    content: bytes
    generation: int = 0
    version: int = 0

    def traced(self) -> bytes:
        """Content followed by the metadata counters, as measured."""
        return self.content + u32(self.generation) + u32(self.version)


@dataclass
class Tracer:
    """Simulated configuration store with kernel-style metadata counters.

    Writing an existing path bumps its version; deleting and recreating a
    path bumps its generation, so restoring old content never restores the
    old measurement.
    """

    files: dict[str, FileEntry] = field(default_factory=dict)
    _generations: dict[str, int] = field(default_factory=dict)

    def write(self, path: str, content: bytes) -> None:
        entry = self.files.get(path)
        if entry is None:
            gen = self._generations.get(path, -1) + 1
            self._generations[path] = gen
            self.files[path] = FileEntry(bytes(content), gen, 0)
        else:
            entry.content = bytes(content)
            entry.version += 1

    def delete(self, path: str) -> None:
        if self.files.pop(path, None) is None:
            raise AgentError("unknown-path", path)

    def recreate(self, path: str, content: bytes) -> None:
        self.files.pop(path, None)
        self.write(path, content)

    def traced(self, path: str) -> bytes:
        entry = self.files.get(path)
        if entry is None:
            raise AgentError("unknown-path", path)
        return entry.traced()

    @classmethod
    def from_manifest(cls, manifest: dict) -> "Tracer":
        """Build a store from ``{path: hex content}``."""
        tracer = cls()
        for path, content in sorted(manifest.items()):
            tracer.write(path, bytes.fromhex(content))
        return tracer

    @classmethod
    def load(cls, path) -> "Tracer":
        return cls.from_manifest(json.loads(Path(path).read_text()))


class Agent:
    """Holder of the VF's measurement key; nothing else reads ``hk``."""

    def __init__(self, hk: HmacKey):
        self._hk = hk

    def measure(self, tracer: Tracer, fqpn: str) -> bytes:
        return self._hk.mac(sha256(tracer.traced(fqpn)))

    def secret_material(self) -> list[bytes]:
        return [self._hk.key]


# ---------------------------------------------------------------------------
# Virtual function
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicySnapshot:
    """An accepted policy and what the VF must present to satisfy it."""

    h_pol: bytes
    ticket: Ticket
    pcrs: tuple[int, ...]
    nvpcrs: tuple[tuple[int, bytes], ...]


def verify_attestation(ak_public: bytes, nonce: bytes, signature: bytes) -> bool:
    """Verifier decision: does ``signature`` over ``nonce`` verify under the AK?"""
    return crypto.verify(ak_public, nonce, signature)


class VirtualFunction:
    def __init__(self, vf_id: str, tpm: VTpm, agent: Agent, tracer: Tracer,
                 orc_ek_public: bytes, rng: random.Random):
        self.vf_id = vf_id
        self.tpm = tpm
        self.agent = agent
        self.tracer = tracer
        self.orc_ek_public = orc_ek_public
        self.orc_ek_key = KeyPublic.decode(orc_ek_public).public_key
        self._rng = rng
        self.sk_handle = tpm.evict_control(tpm.create_primary("storage"))
        self.ek_handle = tpm.evict_control(tpm.create_primary("endorsement"))
        handle, self.orc_ek_name = tpm.load_external(orc_ek_public)
        self.orc_ek_handle = tpm.evict_control(handle)
        self.ak_handle: Optional[int] = None
        self.ak_public: Optional[bytes] = None
        self.pcrs: set[int] = set()
        self.pcr_log: dict[int, bytes] = {}
        self.nvpcrs: list[tuple[int, bytes]] = []
        self.current_policy: Optional[PolicySnapshot] = None
        self.policy_history: list[PolicySnapshot] = []
        self.peers: dict[str, bytes] = {}
        self.directory_serial: dict[str, int] = {}
        self.pending_challenges: dict[str, tuple[bytes, int]] = {}
        self.pending_detach: dict[int, int] = {}

    @classmethod
    def provision(cls, vf_id: str, seed, orc_ek_public: bytes, hk: HmacKey,
                  tracer: Optional[Tracer] = None,
                  profiler: Optional[Callable[[str, int], None]] = None) -> "VirtualFunction":
        seed_bytes = seed if isinstance(seed, bytes) else str(seed).encode()
        tpm = VTpm(sha256(b"vf-tpm" + seed_bytes + vf_id.encode()), profiler)
        rng = random.Random(sha256(b"vf-rng" + seed_bytes + vf_id.encode()))
        return cls(vf_id, tpm, Agent(hk), tracer or Tracer(), orc_ek_public, rng)

    @property
    def ek_public(self) -> bytes:
        return self.tpm.public_of(self.ek_handle)

    def secret_material(self) -> list[bytes]:
        return self.tpm.secret_material() + self.agent.secret_material()

    def _nv_expected(self, idx: int) -> Optional[int]:
        for pos, (handle, _) in enumerate(self.nvpcrs):
            if handle == idx:
                return pos
        return None

    # -- enrollment ---------------------------------------------------------

    def run_ak_creation(self, req: AkCreationRequest) -> AkCertificateResponse:
        if self.ak_handle is not None:
            raise AgentError("ak-exists")
        blob, creation_hash, ticket = self.tpm.create(self.sk_handle, req.attributes, req.h_pol)
        handle, _ = self.tpm.load(self.sk_handle, blob)
        try:
            cert_info, signature = self.tpm.certify_creation(handle, self.ek_handle, creation_hash, ticket)
            persistent = self.tpm.evict_control(handle)
        finally:
            self.tpm.flush_context(handle)
        self.ak_handle = persistent
        self.ak_public = blob.public
        return AkCertificateResponse(cert_info, signature, blob.public)

    # -- supervised update --------------------------------------------------

    def measure(self, fqpn: str) -> bytes:
        return self.agent.measure(self.tracer, fqpn)

    def run_measurement_update(self, req: UpdateRequest) -> AuditResponse:
        if req.is_nv and self._nv_expected(req.idx) is None or not req.is_nv and req.idx not in self.pcrs:
            raise AgentError("unknown-index", str(req.idx))
        if len(req.h_pol) != 32 or sha256(req.h_pol) != req.h_pol_hash:
            raise AgentError("bad-orchestrator-signature", "policy hash does not match policy")
        try:
            ticket = self.tpm.verify_signature(self.orc_ek_handle, req.h_pol_hash, req.signature)
        except TpmError as exc:
            raise AgentError("bad-orchestrator-signature", exc.code) from exc
        h_update = self.measure(req.fqpn)
        session, _ = self.tpm.start_auth_session("HMAC")
        try:
            if req.is_nv:
                pos = self._nv_expected(req.idx)
                before = self.nvpcrs[pos]
                self.nvpcrs[pos] = (req.idx, crypto.extend(before[1], h_update))
                try:
                    self.tpm.nv_extend(req.idx, h_update, audit_session=session)
                except TpmError:
                    self.nvpcrs[pos] = before
                    raise
            else:
                self.tpm.pcr_extend(req.idx, h_update, audit_session=session)
                self.pcr_log[req.idx] = crypto.extend(self.pcr_log[req.idx], h_update)
            audit_info, signature = self.tpm.get_session_audit_digest(self.ek_handle, session)
        finally:
            self.tpm.flush_context(session)
        snapshot = PolicySnapshot(req.h_pol, ticket, tuple(sorted(self.pcrs)), tuple(self.nvpcrs))
        self.current_policy = snapshot
        self.policy_history.append(snapshot)
        return AuditResponse(req.idx, req.is_nv, audit_info, signature)

    # -- oblivious remote attestation ---------------------------------------

    def _unlock_and_sign(self, snapshot: PolicySnapshot, message: bytes) -> bytes:
        session, _ = self.tpm.start_auth_session("POLICY")
        try:
            for handle, expected in snapshot.nvpcrs:
                self.tpm.policy_nv(session, handle, expected)
            if snapshot.pcrs:
                self.tpm.policy_pcr(session, snapshot.pcrs)
            self.tpm.policy_authorize(session, snapshot.h_pol, snapshot.ticket, self.orc_ek_name)
            return self.tpm.sign(self.ak_handle, message, session=session)
        finally:
            if session in self.tpm.sessions:
                self.tpm.flush_context(session)

    def run_ora_prover(self, nonce: bytes) -> bytes:
        if self.ak_handle is None or self.current_policy is None:
            raise AttestationFailed("no policy")
        try:
            return self._unlock_and_sign(self.current_policy, nonce)
        except TpmError as exc:
            raise AttestationFailed(exc.code) from exc

    def unlocking_policies(self) -> list[bytes]:
        """Every policy this VF has accepted that would still unlock its AK."""
        out = []
        if self.ak_handle is None:
            return out
        for snapshot in self.policy_history:
            try:
                self._unlock_and_sign(snapshot, b"freshness-probe")
            except TpmError:
                continue
            if snapshot.h_pol not in out:
                out.append(snapshot.h_pol)
        return out

    def issue_challenge(self, peer_id: str, now: int = 0) -> Challenge:
        if peer_id not in self.peers:
            raise AgentError("unknown-peer", peer_id)
        nonce = self._rng.randbytes(NONCE_SIZE)
        self.pending_challenges[peer_id] = (nonce, now + CHALLENGE_DEADLINE)
        return Challenge(nonce)

    def check_response(self, peer_id: str, response: ChallengeResponse, now: int = 0) -> bool:
        pending = self.pending_challenges.get(peer_id)
        ak_public = self.peers.get(peer_id)
        if pending is None or ak_public is None:
            return False
        nonce, deadline = pending
        if now > deadline:
            del self.pending_challenges[peer_id]
            return False
        if not verify_attestation(ak_public, nonce, response.signature):
            # a bogus answer must not cancel the challenge for the real one
            return False
        del self.pending_challenges[peer_id]
        return True

    def expire_challenges(self) -> list[str]:
        """Drop unanswered challenges; every dropped peer counts as untrusted."""
        expired = sorted(self.pending_challenges)
        self.pending_challenges.clear()
        return expired

    def _fresh_notice(self, vf_id: str, serial: int) -> bool:
        if serial <= self.directory_serial.get(vf_id, 0):
            return False
        self.directory_serial[vf_id] = serial
        return True

    def accept_advertisement(self, adv: Advertisement) -> bool:
        message = advertisement_bytes(adv.vf_id, adv.ak_public, adv.serial)
        if not crypto.verify(self.orc_ek_key, message, adv.signature):
            return False
        if not self._fresh_notice(adv.vf_id, adv.serial):
            return False
        self.peers[adv.vf_id] = adv.ak_public
        return True

    def accept_revocation(self, rev: Revocation) -> bool:
        if not crypto.verify(self.orc_ek_key, revocation_bytes(rev.vf_id, rev.serial), rev.signature):
            return False
        if not self._fresh_notice(rev.vf_id, rev.serial):
            return False
        self.peers.pop(rev.vf_id, None)
        self.pending_challenges.pop(rev.vf_id, None)
        return True

    # -- attach / detach ----------------------------------------------------

    def run_attach(self, req: AttachRequest) -> Optional[NvCertResponse]:
        if not req.is_nv:
            if req.idx in self.pcrs or self.tpm.pcr_read(req.idx) != ZERO_DIGEST:
                raise AgentError("index-in-use", str(req.idx))
            # bring the real register to the same start value as the mock
            self.tpm.pcr_extend(req.idx, req.iv)
            self.pcrs.add(req.idx)
            self.pcr_log[req.idx] = crypto.extend(ZERO_DIGEST, req.iv)
            return None
        if self._nv_expected(req.idx) is not None:
            raise AgentError("index-in-use", f"0x{req.idx:08x}")
        if req.h_pol is None:
            raise AgentError("malformed", "NV attach without a deletion policy")
        self.tpm.nv_define_space(req.idx, NvTemplate(req.nv_attributes), req.h_pol)
        self.tpm.nv_extend(req.idx, req.iv)
        cert_info, signature = self.tpm.nv_certify(req.idx, self.ek_handle)
        self.nvpcrs.append((req.idx, crypto.extend(ZERO_DIGEST, req.iv)))
        return NvCertResponse(req.idx, cert_info, signature)

    def begin_detach(self, req: DetachRequest):
        """First VF step of a detach.

        Returns a SessionNonce for NV PCRs, an AuditResponse when the
        orchestrator asked for a poison extend, and None otherwise.
        """
        if req.is_nv:
            if self._nv_expected(req.idx) is None:
                raise AgentError("unknown-index", f"0x{req.idx:08x}")
            old = self.pending_detach.pop(req.idx, None)
            if old is not None and old in self.tpm.sessions:
                self.tpm.flush_context(old)
            session, nonce = self.tpm.start_auth_session("POLICY")
            self.pending_detach[req.idx] = session
            return SessionNonce(req.idx, session, nonce)
        if req.idx not in self.pcrs:
            raise AgentError("unknown-index", str(req.idx))
        response = None
        if req.poison is not None:
            session, _ = self.tpm.start_auth_session("HMAC")
            try:
                self.tpm.pcr_extend(req.idx, req.poison, audit_session=session)
                audit_info, signature = self.tpm.get_session_audit_digest(self.ek_handle, session)
            finally:
                self.tpm.flush_context(session)
            response = AuditResponse(req.idx, False, audit_info, signature)
        self.pcrs.discard(req.idx)
        self.pcr_log.pop(req.idx, None)
        return response

    def run_detach(self, grant: DeletionGrant) -> None:
        """Delete an NV PCR under an orchestrator grant."""
        session = self.pending_detach.get(grant.idx)
        if session is None or session != grant.session:
            raise AgentError("no-pending-detach", f"0x{grant.idx:08x}")
        if sha256(grant.h_pol) != grant.h_pol_hash:
            raise AgentError("bad-orchestrator-signature")
        try:
            ticket = self.tpm.verify_signature(self.orc_ek_handle, grant.h_pol_hash, grant.h_pol_signature)
            self.tpm.policy_signed(session, self.orc_ek_handle, grant.a_hash_signature, grant.h_cp)
            self.tpm.policy_authorize(session, grant.h_pol, ticket, self.orc_ek_name)
            self.tpm.policy_command_code(session, CommandCode.NV_UndefineSpaceSpecial)
            self.tpm.nv_undefine_space_special(grant.idx, session)
        except TpmError:
            if session in self.tpm.sessions:
                self.tpm.flush_context(session)
            self.pending_detach.pop(grant.idx, None)
            raise
        del self.pending_detach[grant.idx]
        self.nvpcrs.pop(self._nv_expected(grant.idx))

    # -- views --------------------------------------------------------------

    def real_values(self) -> dict[tuple[bool, int], bytes]:
        """What the TPM actually holds for every index this VF tracks or defined."""
        out = {(False, i): self.tpm.pcr_read(i) for i in range(len(self.tpm.pcrs))
               if self.tpm.pcrs[i] != ZERO_DIGEST or i in self.pcrs}
        for handle, nv in self.tpm.nv_store.items():
            if nv.written:
                out[(True, handle)] = nv.value
        return out

    def in_sync(self) -> bool:
        for handle, expected in self.nvpcrs:
            nv = self.tpm.nv_store.get(handle)
            if nv is None or nv.value != expected:
                return False
        return all(self.tpm.pcr_read(i) == self.pcr_log.get(i) for i in self.pcrs)

    def dump(self) -> dict:
        return {
            "vf_id": self.vf_id,
            "ak": self.ak_public.hex() if self.ak_public else None,
            "pcrs": sorted(self.pcrs),
            "nvpcrs": [[f"0x{h:08x}", v.hex()] for h, v in self.nvpcrs],
            "policy": self.current_policy.h_pol.hex() if self.current_policy else None,
            "peers": sorted(self.peers),
            "tpm": self.tpm.dump(),
        }
