"""Adapters that let the orchestrator and VFs speak envelopes.

Each party turns an incoming envelope into zero or more outgoing
``(recipient, protocol, message)`` triples and records what happened as
plain events the scenario engine can read.
"""

from __future__ import annotations

from typing import Callable, Optional

from ..agent import AgentError, Tracer, VirtualFunction
from ..messages import (
    AkCertificateResponse,
    AkCreationRequest,
    Advertisement,
    AttachRequest,
    AuditResponse,
    Challenge,
    ChallengeResponse,
    DeletionGrant,
    DetachRequest,
    Message,
    NvCertResponse,
    PayloadError,
    Revocation,
    SessionNonce,
    UpdateRequest,
)
from ..orchestrator import Orchestrator, OrchestratorError
from ..vtpm import TpmError
from .envelope import Envelope

MESSAGE_TYPES: dict[str, type] = {
    cls.__name__: cls
    for cls in (
        AkCreationRequest, AkCertificateResponse, UpdateRequest, AuditResponse, AttachRequest,
        NvCertResponse, DetachRequest, SessionNonce, DeletionGrant, Advertisement, Revocation,
        Challenge, ChallengeResponse,
    )
}

ORCHESTRATOR_ID = "orc"

Outgoing = tuple[str, str, Message]


def decode(env: Envelope) -> Message:
    cls = MESSAGE_TYPES.get(env.step)
    if cls is None:
        raise PayloadError(f"unknown step {env.step!r}")
    return cls.from_payload(env.payload)


class Party:
    party_id: str

    def __init__(self):
        self.events: list[dict] = []

    def record(self, **event) -> None:
        self.events.append(event)

    def handle(self, env: Envelope, now: int) -> list[Outgoing]:
        try:
            msg = decode(env)
        except PayloadError as exc:
            self.record(kind="failure", protocol=env.protocol, code="malformed", detail=str(exc))
            return []
        try:
            return self.dispatch(env, msg, now)
        except (AgentError, OrchestratorError, TpmError) as exc:
            self.record(kind="failure", protocol=env.protocol, peer=env.sender, step=env.step,
                        code=exc.code)
            return []

    def dispatch(self, env: Envelope, msg: Message, now: int) -> list[Outgoing]:
        raise NotImplementedError


class OrchestratorParty(Party):
    party_id = ORCHESTRATOR_ID

    def __init__(self, orc: Orchestrator):
        super().__init__()
        self.orc = orc
        self.references: dict[str, Tracer] = {}

    def deploy(self, vf_id: str, path: str, content: bytes) -> None:
        tracer = self.references.setdefault(vf_id, Tracer())
        tracer.write(path, content)
        self.orc.set_reference(vf_id, path, tracer.traced(path))

    def _advertise(self, vf_id: str) -> list[Outgoing]:
        out: list[Outgoing] = []
        adv = self.orc.advertisement(vf_id)
        for peer in self.orc.chain_peers(vf_id):
            out.append((peer, "ADVERTISE", adv))
            if peer in self.orc.graph.directory:
                out.append((vf_id, "ADVERTISE", self.orc.advertisement(peer)))
        return out

    def dispatch(self, env: Envelope, msg: Message, now: int) -> list[Outgoing]:
        vf_id = env.sender
        if vf_id not in self.orc.records:
            self.record(kind="failure", protocol=env.protocol, peer=vf_id, code="unknown-vf")
            return []
        if isinstance(msg, AkCertificateResponse):
            verdict = self.orc.verify_ak_certificate(vf_id, msg.cert_info, msg.signature, msg.ak_public)
            self.record(kind="verdict", protocol="ENROLL", vf=vf_id, ok=verdict.ok, reason=verdict.reason)
            return self._advertise(vf_id) if verdict else []
        if isinstance(msg, AuditResponse):
            poison = not msg.is_nv and msg.idx in self.orc.records[vf_id].pending_poison
            verdict = self.orc.handle_audit(vf_id, msg.idx, msg.is_nv, msg.audit_info, msg.signature)
            self.record(kind="verdict", protocol="DETACH" if poison else "UPDATE", vf=vf_id,
                        idx=msg.idx, ok=verdict.ok, reason=verdict.reason)
            return []
        if isinstance(msg, NvCertResponse):
            verdict = self.orc.verify_nvpcr_certificate(vf_id, msg.cert_info, msg.signature)
            self.record(kind="verdict", protocol="ATTACH", vf=vf_id, idx=msg.idx, ok=verdict.ok,
                        reason=verdict.reason)
            return []
        if isinstance(msg, SessionNonce):
            grant = self.orc.authorize_nv_deletion(vf_id, msg.idx, msg.nonce, msg.session)
            self.record(kind="verdict", protocol="DETACH", vf=vf_id, idx=msg.idx, ok=True, reason="granted")
            return [(vf_id, "DETACH", grant)]
        self.record(kind="failure", protocol=env.protocol, peer=vf_id, code="unexpected-message",
                    step=env.step)
        return []


class VfParty(Party):
    def __init__(self, vf: VirtualFunction,
                 on_accept: Optional[Callable[[str, str], None]] = None):
        super().__init__()
        self.vf = vf
        self.party_id = vf.vf_id
        self.on_accept = on_accept

    def dispatch(self, env: Envelope, msg: Message, now: int) -> list[Outgoing]:
        vf = self.vf
        if isinstance(msg, Challenge):
            try:
                signature = vf.run_ora_prover(msg.nonce)
            except AgentError as exc:
                self.record(kind="failure", protocol="ORA", peer=env.sender, code=exc.code)
                return []
            return [(env.sender, "ORA", ChallengeResponse(signature))]
        if isinstance(msg, ChallengeResponse):
            accepted = vf.check_response(env.sender, msg, now)
            self.record(kind="attestation", verifier=vf.vf_id, prover=env.sender, accepted=accepted)
            if accepted and self.on_accept is not None:
                self.on_accept(vf.vf_id, env.sender)
            return []
        if isinstance(msg, (Advertisement, Revocation)):
            if env.sender != ORCHESTRATOR_ID:
                self.record(kind="failure", protocol="ADVERTISE", peer=env.sender, code="not-orchestrator")
                return []
            ok = vf.accept_advertisement(msg) if isinstance(msg, Advertisement) else vf.accept_revocation(msg)
            self.record(kind="directory", step=env.step, subject=msg.vf_id, ok=ok)
            return []
        # everything else must come from the orchestrator
        if env.sender != ORCHESTRATOR_ID:
            self.record(kind="failure", protocol=env.protocol, peer=env.sender, code="not-orchestrator")
            return []
        if isinstance(msg, AkCreationRequest):
            return [(ORCHESTRATOR_ID, "ENROLL", vf.run_ak_creation(msg))]
        if isinstance(msg, UpdateRequest):
            return [(ORCHESTRATOR_ID, "UPDATE", vf.run_measurement_update(msg))]
        if isinstance(msg, AttachRequest):
            cert = vf.run_attach(msg)
            self.record(kind="local", protocol="ATTACH", idx=msg.idx, is_nv=msg.is_nv)
            return [(ORCHESTRATOR_ID, "ATTACH", cert)] if cert is not None else []
        if isinstance(msg, DetachRequest):
            reply = vf.begin_detach(msg)
            self.record(kind="local", protocol="DETACH", idx=msg.idx, is_nv=msg.is_nv)
            return [(ORCHESTRATOR_ID, "DETACH", reply)] if reply is not None else []
        if isinstance(msg, DeletionGrant):
            vf.run_detach(msg)
            self.record(kind="local", protocol="DETACH", idx=msg.idx, is_nv=True, deleted=True)
            return []
        self.record(kind="failure", protocol=env.protocol, peer=env.sender, code="unexpected-message",
                    step=env.step)
        return []
