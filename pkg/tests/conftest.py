import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from blindtrust.agent import Tracer, VirtualFunction  # noqa: E402
from blindtrust.crypto import HmacKey, sha256  # noqa: E402
from blindtrust.orchestrator import Orchestrator  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
CONF = "/etc/app/app.conf"

_criteria: dict[str, str] = {}


class World:
    """An orchestrator with enrolled VFs, driven by direct calls."""

    def __init__(self, ids=("vf1", "vf2"), seed=1, supersession=True):
        self.orc = Orchestrator(seed, supersession=supersession)
        self.vfs = {}
        for vf_id in ids:
            hk = HmacKey(sha256(b"test-hk" + vf_id.encode()))
            tracer = Tracer()
            tracer.write(CONF, b"mode=strict\n")
            vf = VirtualFunction.provision(vf_id, seed, self.orc.ek_public_area, hk, tracer)
            self.orc.register_vf(vf_id, vf.ek_public, hk)
            self.orc.set_reference(vf_id, CONF, tracer.traced(CONF))
            self.vfs[vf_id] = vf

    def enroll(self, vf_id):
        vf = self.vfs[vf_id]
        resp = vf.run_ak_creation(self.orc.begin_enrollment(vf_id))
        return self.orc.verify_ak_certificate(vf_id, resp.cert_info, resp.signature, resp.ak_public)

    def enroll_all(self):
        for vf_id in self.vfs:
            assert self.enroll(vf_id)
        for vf_id in self.vfs:
            for other, vf in self.vfs.items():
                if other != vf_id:
                    assert vf.accept_advertisement(self.orc.advertisement(vf_id))
        return self

    def attach(self, vf_id, idx, is_nv=False):
        vf = self.vfs[vf_id]
        cert = vf.run_attach(self.orc.request_pcr_attach(vf_id, idx, is_nv))
        if cert is None:
            return None
        return self.orc.verify_nvpcr_certificate(vf_id, cert.cert_info, cert.signature)

    def deploy(self, vf_id, content, path=CONF):
        vf = self.vfs[vf_id]
        vf.tracer.write(path, content)
        self.orc.set_reference(vf_id, path, vf.tracer.traced(path))

    def update(self, vf_id, idx, is_nv=False, path=CONF):
        vf = self.vfs[vf_id]
        req = self.orc.request_update(vf_id, path, idx, is_nv)
        resp = vf.run_measurement_update(req)
        return self.orc.handle_audit(vf_id, resp.idx, resp.is_nv, resp.audit_info, resp.signature)

    def attest(self, verifier, prover):
        from blindtrust.messages import ChallengeResponse

        challenge = self.vfs[verifier].issue_challenge(prover)
        signature = self.vfs[prover].run_ora_prover(challenge.nonce)
        return self.vfs[verifier].check_response(prover, ChallengeResponse(signature))


@pytest.fixture
def world():
    return World().enroll_all()


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f" ({detail})" if detail else "")
    _criteria[str(number)] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_criteria, key=int):
            terminalreporter.write_line(_criteria[key])
