"""Timing of the five protocols with a per-TPM-command breakdown.

Each protocol round runs in-process (orchestrator and VF on one thread).
A protocol row times the whole round; its sub-rows sum the time spent in
each TPM command during that round.
"""

from __future__ import annotations

import platform
import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field

from .agent import Tracer, VirtualFunction
from .crypto import HmacKey, sha256
from .orchestrator import Orchestrator

PROTOCOLS = (
    "AK creation",
    "Measurement update",
    "ORA (prover)",
    "Attaching NVPCR",
    "Detaching NVPCR",
)
NV_BASE = 0x01000100


@dataclass
class CommandRow:
    command: str
    samples_ms: list[float]
    calls_per_run: float

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def sd_ms(self) -> float:
        return statistics.stdev(self.samples_ms) if len(self.samples_ms) > 1 else 0.0


@dataclass
class ProtocolRow:
    protocol: str
    samples_ms: list[float]
    commands: list[CommandRow] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def sd_ms(self) -> float:
        return statistics.stdev(self.samples_ms) if len(self.samples_ms) > 1 else 0.0


@dataclass
class BenchReport:
    rows: list[ProtocolRow]
    environment: str

    def to_json(self) -> dict:
        return {
            "environment": self.environment,
            "rows": [
                {
                    "protocol": r.protocol, "mean_ms": r.mean_ms, "sd_ms": r.sd_ms,
                    "iterations": r.iterations, "samples_ms": r.samples_ms,
                    "commands": [
                        {"command": c.command, "mean_ms": c.mean_ms, "sd_ms": c.sd_ms,
                         "calls_per_run": c.calls_per_run, "samples_ms": c.samples_ms}
                        for c in r.commands
                    ],
                }
                for r in self.rows
            ],
        }

    def to_text(self) -> str:
        lines = [f"Timings in ms ({self.environment})", f"{'Protocol / command':<34}{'M':>10}{'SD':>10}{'N':>6}"]
        for row in self.rows:
            lines.append(f"{row.protocol:<34}{row.mean_ms:>10.3f}{row.sd_ms:>10.3f}{row.iterations:>6}")
            for cmd in row.commands:
                label = f"  {cmd.command}" + (f" x{cmd.calls_per_run:g}" if cmd.calls_per_run != 1 else "")
                lines.append(f"{label:<34}{cmd.mean_ms:>10.3f}{cmd.sd_ms:>10.3f}")
        return "\n".join(lines)


class _Recorder:
    """Profiler hook collecting per-command time for the current round."""

    def __init__(self):
        self.active = False
        self.current: dict[str, list[int]] = defaultdict(list)

    def __call__(self, command: str, ns: int) -> None:
        if self.active:
            self.current[command].append(ns)

    def start(self) -> None:
        self.current = defaultdict(list)
        self.active = True

    def stop(self) -> dict[str, list[int]]:
        self.active = False
        return dict(self.current)


class _Row:
    def __init__(self, name: str):
        self.name = name
        self.samples: list[float] = []
        self.per_command: list[dict[str, list[int]]] = []

    def add(self, elapsed_ns: int, commands: dict[str, list[int]]) -> None:
        self.samples.append(elapsed_ns / 1e6)
        self.per_command.append(commands)

    def finish(self) -> ProtocolRow:
        names: list[str] = []
        for run in self.per_command:
            for name in run:
                if name not in names:
                    names.append(name)
        commands = []
        for name in names:
            samples = [sum(run.get(name, [])) / 1e6 for run in self.per_command]
            calls = statistics.fmean(len(run.get(name, [])) for run in self.per_command)
            commands.append(CommandRow(name, samples, calls))
        return ProtocolRow(self.name, self.samples, commands)


def _timed(row: _Row, recorder: _Recorder, fn) -> None:
    recorder.start()
    start = time.perf_counter_ns()
    fn()
    elapsed = time.perf_counter_ns() - start
    row.add(elapsed, recorder.stop())


def _fresh_vf(orc: Orchestrator, vf_id: str, recorder: _Recorder) -> VirtualFunction:
    hk = HmacKey(sha256(b"bench-hk" + vf_id.encode()))
    tracer = Tracer()
    tracer.write("/etc/service.conf", b"listen 8443\n")
    vf = VirtualFunction.provision(vf_id, "bench", orc.ek_public_area, hk, tracer, recorder)
    orc.register_vf(vf_id, vf.ek_public, hk)
    orc.set_reference(vf_id, "/etc/service.conf", tracer.traced("/etc/service.conf"))
    return vf


def _enroll(orc: Orchestrator, vf: VirtualFunction) -> None:
    resp = vf.run_ak_creation(orc.begin_enrollment(vf.vf_id))
    if not orc.verify_ak_certificate(vf.vf_id, resp.cert_info, resp.signature, resp.ak_public):
        raise RuntimeError("enrollment failed during benchmark")


def _update(orc: Orchestrator, vf: VirtualFunction, idx: int, is_nv: bool) -> None:
    req = orc.request_update(vf.vf_id, "/etc/service.conf", idx, is_nv)
    resp = vf.run_measurement_update(req)
    if not orc.handle_audit(vf.vf_id, resp.idx, resp.is_nv, resp.audit_info, resp.signature):
        raise RuntimeError("audit verification failed during benchmark")


def _attach_nv(orc: Orchestrator, vf: VirtualFunction, idx: int) -> None:
    cert = vf.run_attach(orc.request_pcr_attach(vf.vf_id, idx, True))
    if not orc.verify_nvpcr_certificate(vf.vf_id, cert.cert_info, cert.signature):
        raise RuntimeError("NV PCR certificate rejected during benchmark")


def _detach_nv(orc: Orchestrator, vf: VirtualFunction, idx: int) -> None:
    nonce = vf.begin_detach(orc.request_pcr_detach(vf.vf_id, idx, True))
    vf.run_detach(orc.authorize_nv_deletion(vf.vf_id, idx, nonce.nonce, nonce.session))


def run_bench(iterations: int = 50) -> BenchReport:
    if iterations < 2:
        raise ValueError("need at least 2 iterations for a standard deviation")
    recorder = _Recorder()
    orc = Orchestrator("bench")
    rows = {name: _Row(name) for name in PROTOCOLS}

    for i in range(iterations):
        vf = _fresh_vf(orc, f"ak-{i}", recorder)
        _timed(rows["AK creation"], recorder, lambda: _enroll(orc, vf))

    # one long-lived VF with 1 PCR and 1 NV PCR attached
    vf = _fresh_vf(orc, "prover", recorder)
    _enroll(orc, vf)
    vf.run_attach(orc.request_pcr_attach("prover", 16, False))
    _attach_nv(orc, vf, NV_BASE)
    for i in range(iterations):
        target = (NV_BASE, True) if i % 2 else (16, False)
        _timed(rows["Measurement update"], recorder, lambda: _update(orc, vf, *target))
    nonce = bytes(16)
    for _ in range(iterations):
        _timed(rows["ORA (prover)"], recorder, lambda: vf.run_ora_prover(nonce))

    for i in range(iterations):
        idx = NV_BASE + 1 + i
        _timed(rows["Attaching NVPCR"], recorder, lambda: _attach_nv(orc, vf, idx))
    for i in range(iterations):
        idx = NV_BASE + 1 + i
        _timed(rows["Detaching NVPCR"], recorder, lambda: _detach_nv(orc, vf, idx))

    env = f"{platform.python_implementation()} {platform.python_version()} on {platform.machine()} {platform.system()}"
    return BenchReport([rows[name].finish() for name in PROTOCOLS], env)
