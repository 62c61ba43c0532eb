"""Scenario files: parse, run against fresh parties, check invariants, trace.

A run is single-threaded and fully determined by the scenario file and seed;
the JSON-lines trace it produces is byte-identical across runs.  Wall-clock
step timings are kept on the result object only, never in the trace.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..agent import AgentError, Tracer, VirtualFunction
from ..crypto import HmacKey, sha256
from ..orchestrator import Orchestrator, OrchestratorError
from ..vtpm import NV_INDEX_FIRST, NV_INDEX_LAST, PCR_COUNT
from .adversary import Adversary, ScriptError
from .envelope import canonical_json
from .network import Network
from .parties import ORCHESTRATOR_ID, OrchestratorParty, VfParty

OPS = {
    "enroll": ("vf",),
    "deploy": ("vf", "path"),
    "compromise": ("vf", "path"),
    "attach": ("vf",),
    "update": ("vf", "path"),
    "attest": ("verifier", "prover"),
    "detach": ("vf",),
    "mutate": ("vf",),
    "revoke": ("vf",),
    "replay": ("select",),
    "inject": ("envelope",),
    "freshness": ("vf",),
}
ASSERTIONS = ("sync", "soundness", "secrets", "freshness")
DEFAULT_ASSERTIONS = ["sync", "soundness", "secrets"]


class ScenarioError(ValueError):
    """The scenario file does not validate; ``where`` locates the problem."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass
class VfSpec:
    vf_id: str
    chain: str
    files: dict[str, bytes]


@dataclass
class Scenario:
    name: str
    seed: int
    expect: str
    supersession: bool
    vfs: list[VfSpec]
    steps: list[dict]
    adversary: Optional[dict]
    assertions: list[str]
    description: str = ""


def _content(step: dict, where: str) -> bytes:
    if "content" in step:
        try:
            return bytes.fromhex(step["content"])
        except (TypeError, ValueError):
            raise ScenarioError(f"{where}.content", "expected a hex string") from None
    if "text" in step:
        return str(step["text"]).encode()
    raise ScenarioError(where, "needs 'content' (hex) or 'text'")


def parse_index(step: dict, where: str) -> tuple[int, bool]:
    if "nv" in step:
        raw = step["nv"]
        try:
            idx = int(raw, 0) if isinstance(raw, str) else int(raw)
        except ValueError:
            raise ScenarioError(f"{where}.nv", f"bad NV handle {raw!r}") from None
        if not NV_INDEX_FIRST <= idx <= NV_INDEX_LAST:
            raise ScenarioError(f"{where}.nv", f"NV handle 0x{idx:08x} out of range")
        return idx, True
    if "pcr" in step:
        idx = step["pcr"]
        if not isinstance(idx, int) or not 0 <= idx < PCR_COUNT:
            raise ScenarioError(f"{where}.pcr", f"PCR index must be 0..{PCR_COUNT - 1}")
        return idx, False
    raise ScenarioError(where, "needs 'pcr' or 'nv'")


def parse_scenario(data) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("$", "scenario must be a JSON object")
    for key in ("name", "vfs", "steps"):
        if key not in data:
            raise ScenarioError("$", f"missing '{key}'")
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ScenarioError("$.seed", "must be an integer")
    expect = data.get("expect", "pass")
    if expect not in ("pass", "fail"):
        raise ScenarioError("$.expect", "must be 'pass' or 'fail'")
    vfs, ids = [], set()
    if not isinstance(data["vfs"], list) or not data["vfs"]:
        raise ScenarioError("$.vfs", "must be a non-empty list")
    for i, raw in enumerate(data["vfs"]):
        where = f"$.vfs[{i}]"
        if not isinstance(raw, dict) or not isinstance(raw.get("id"), str):
            raise ScenarioError(where, "needs a string 'id'")
        vf_id = raw["id"]
        if vf_id in ids or vf_id == ORCHESTRATOR_ID:
            raise ScenarioError(f"{where}.id", f"duplicate or reserved party id {vf_id!r}")
        ids.add(vf_id)
        files = {}
        for path, content in raw.get("files", {}).items():
            try:
                files[path] = bytes.fromhex(content)
            except (TypeError, ValueError):
                raise ScenarioError(f"{where}.files[{path!r}]", "expected a hex string") from None
        vfs.append(VfSpec(vf_id, str(raw.get("chain", "sg0")), files))
    if not isinstance(data["steps"], list):
        raise ScenarioError("$.steps", "must be a list")
    steps = []
    for i, step in enumerate(data["steps"]):
        where = f"$.steps[{i}]"
        if not isinstance(step, dict) or step.get("op") not in OPS:
            raise ScenarioError(where, f"'op' must be one of {', '.join(OPS)}")
        for key in OPS[step["op"]]:
            if key not in step:
                raise ScenarioError(where, f"{step['op']} needs '{key}'")
        for key in ("vf", "verifier", "prover"):
            if key in step and step[key] not in ids:
                raise ScenarioError(f"{where}.{key}", f"unknown party {step[key]!r}")
        if step["op"] in ("attach", "update", "detach", "mutate"):
            parse_index(step, where)
        if step["op"] in ("deploy", "compromise"):
            _content(step, where)
        steps.append(step)
    assertions = data.get("assertions", DEFAULT_ASSERTIONS)
    if not isinstance(assertions, list) or any(a not in ASSERTIONS for a in assertions):
        raise ScenarioError("$.assertions", f"entries must be among {', '.join(ASSERTIONS)}")
    adversary = data.get("adversary")
    try:
        Adversary.from_json(adversary)
    except ScriptError as exc:
        raise ScenarioError("$.adversary", str(exc)) from None
    return Scenario(
        name=str(data["name"]), seed=seed, expect=expect,
        supersession=bool(data.get("supersession", True)), vfs=vfs, steps=steps,
        adversary=adversary, assertions=list(assertions), description=str(data.get("description", "")),
    )


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return parse_scenario(data)


@dataclass
class Trace:
    lines: list[dict] = field(default_factory=list)

    def add(self, record: dict) -> None:
        self.lines.append(record)

    def to_jsonl(self) -> str:
        return "".join(canonical_json(line) + "\n" for line in self.lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


@dataclass
class RunResult:
    scenario: Scenario
    passed: bool
    trace: Trace
    outcomes: list
    failure: Optional[dict] = None
    timings_ms: list[float] = field(default_factory=list)
    accepted: list[tuple[str, str]] = field(default_factory=list)
    violations: list[dict] = field(default_factory=list)

    @property
    def as_expected(self) -> bool:
        return self.passed == (self.scenario.expect == "pass")


def outcome_matches(expect, outcome) -> bool:
    if isinstance(expect, str) and isinstance(outcome, str):
        return outcome == expect or outcome.startswith(expect + ":")
    return expect == outcome


class ScenarioRun:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.trace = Trace()
        self.orc = Orchestrator(self.seed, supersession=scenario.supersession)
        self.trace.add({"kind": "scenario", "name": scenario.name, "seed": self.seed,
                        "expect": scenario.expect, "supersession": scenario.supersession,
                        "orchestrator_ek": self.orc.ek_name.hex()})
        self.orc_party = OrchestratorParty(self.orc)
        self.vfs: dict[str, VirtualFunction] = {}
        parties = {ORCHESTRATOR_ID: self.orc_party}
        for spec in scenario.vfs:
            hk = HmacKey(sha256(b"hk" + str(self.seed).encode() + b"/" + spec.vf_id.encode()))
            vf = VirtualFunction.provision(spec.vf_id, self.seed, self.orc.ek_public_area, hk,
                                           Tracer(), profiler=self._profiler(spec.vf_id))
            self.orc.register_vf(spec.vf_id, vf.ek_public, hk, spec.chain)
            for path, content in sorted(spec.files.items()):
                vf.tracer.write(path, content)
                self.orc_party.deploy(spec.vf_id, path, content)
            self.vfs[spec.vf_id] = vf
            parties[spec.vf_id] = VfParty(vf, self._on_accept)
        self.adversary = Adversary.from_json(scenario.adversary)
        self.net = Network(parties, self.adversary, self.trace.add)
        self.accepted: list[tuple[str, str]] = []
        self.violations: list[dict] = []
        self._secrets_scanned = 0

    def _profiler(self, party: str):
        def record(command: str, _ns: int) -> None:
            self.trace.add({"kind": "tpm", "party": party, "command": command})
        return record

    # -- invariants -----------------------------------------------------------

    def _on_accept(self, verifier: str, prover: str) -> None:
        self.accepted.append((verifier, prover))
        real = self.vfs[prover].real_values()
        states = self.orc.acceptable_states(prover)
        if not any(all(real.get(k) == v for k, v in state.items()) for state in states):
            violation = {"verifier": verifier, "prover": prover, "diff": self.state_diff(prover)}
            self.violations.append(violation)
            self.trace.add({"kind": "failure", "party": "engine", "code": "unsound-accept", **violation})

    def state_diff(self, vf_id: str) -> list[dict]:
        real = self.vfs[vf_id].real_values()
        mock = self.orc.records[vf_id].mock.values()
        diff = []
        for key in sorted(set(mock) | set(self.vfs[vf_id].real_values()),
                          key=lambda k: (k[0], k[1])):
            if key not in mock and not self._tracked(vf_id, key):
                continue
            m, r = mock.get(key), real.get(key)
            if m != r:
                diff.append({"index": f"0x{key[1]:08x}" if key[0] else key[1], "nv": key[0],
                             "mock": m.hex() if m else None, "real": r.hex() if r else None})
        return diff

    def _tracked(self, vf_id: str, key) -> bool:
        vf = self.vfs[vf_id]
        is_nv, idx = key
        return any(h == idx for h, _ in vf.nvpcrs) if is_nv else idx in vf.pcrs

    def _secret_hex(self) -> list[str]:
        secrets = self.orc.secret_material()
        for vf in self.vfs.values():
            secrets += vf.secret_material()
        return [s.hex() for s in secrets]

    def check(self, name: str) -> Optional[str]:
        if name == "sync":
            for vf_id, vf in self.vfs.items():
                if not vf.in_sync():
                    return f"{vf_id}: agent lists out of sync with its TPM"
                tracked = {(False, i) for i in vf.pcrs} | {(True, h) for h, _ in vf.nvpcrs}
                if tracked != self.orc.records[vf_id].mock.keys() or self.state_diff(vf_id):
                    return f"{vf_id}: mock state differs from real state"
        elif name == "soundness":
            if self.violations:
                v = self.violations[0]
                return f"{v['verifier']} accepted {v['prover']} in a state the orchestrator never authorized"
        elif name == "secrets":
            secrets = self._secret_hex()
            for line in self.trace.lines[self._secrets_scanned:]:
                text = canonical_json(line)
                for secret in secrets:
                    if secret in text:
                        return "secret material appeared in the trace"
            self._secrets_scanned = len(self.trace.lines)
        elif name == "freshness":
            for vf_id, vf in self.vfs.items():
                count = len(vf.unlocking_policies())
                if count > 1:
                    return f"{vf_id}: {count} policies unlock the AK"
        return None

    # -- steps ----------------------------------------------------------------

    def _events(self, party, start: int, **match) -> list[dict]:
        return [e for e in party.events[start:] if all(e.get(k) == v for k, v in match.items())]

    def _verdict(self, start: int, protocol: str, vf: str, idx=None) -> Optional[str]:
        match = {"kind": "verdict", "protocol": protocol, "vf": vf}
        if idx is not None:
            match["idx"] = idx
        events = self._events(self.orc_party, start, **match)
        if not events:
            return None
        # the first answer the orchestrator processed decides the round
        first = events[0]
        return "ok" if first["ok"] else f"rejected:{first['reason']}"

    def _settle(self) -> None:
        self.net.run()
        for vf_id in self.vfs:
            self.orc.expire_pending(vf_id)

    def run_step(self, step: dict):
        op = step["op"]
        orc_start = len(self.orc_party.events)
        net = self.net
        try:
            if op == "enroll":
                vf_id = step["vf"]
                net.send(ORCHESTRATOR_ID, vf_id, "ENROLL", self.orc.begin_enrollment(vf_id))
                self._settle()
                verdict = self._verdict(orc_start, "ENROLL", vf_id)
                return "timeout" if verdict is None else ("enrolled" if verdict == "ok" else verdict)
            if op in ("deploy", "compromise"):
                vf = self.vfs[step["vf"]]
                content = _content(step, "step")
                vf.tracer.write(step["path"], content)
                if op == "deploy":
                    self.orc_party.deploy(vf.vf_id, step["path"], content)
                return "done"
            if op == "attach":
                vf = self.vfs[step["vf"]]
                idx, is_nv = parse_index(step, "step")
                iv = bytes.fromhex(step["iv"]) if "iv" in step else bytes(32)
                net.send(ORCHESTRATOR_ID, vf.vf_id, "ATTACH",
                         self.orc.request_pcr_attach(vf.vf_id, idx, is_nv, iv))
                self._settle()
                if not is_nv:
                    return "attached" if idx in vf.pcrs else "refused"
                verdict = self._verdict(orc_start, "ATTACH", vf.vf_id)
                return "timeout" if verdict is None else ("attached" if verdict == "ok" else verdict)
            if op == "update":
                vf_id = step["vf"]
                idx, is_nv = parse_index(step, "step")
                req = self.orc.request_update(vf_id, step["path"], idx, is_nv)
                net.send(ORCHESTRATOR_ID, vf_id, "UPDATE", req)
                self._settle()
                verdict = self._verdict(orc_start, "UPDATE", vf_id)
                return "timeout" if verdict is None else ("committed" if verdict == "ok" else verdict)
            if op == "attest":
                verifier = self.vfs[step["verifier"]]
                start = len(net.parties[verifier.vf_id].events)
                challenge = verifier.issue_challenge(step["prover"], net.tick)
                net.send(verifier.vf_id, step["prover"], "ORA", challenge)
                net.run()
                events = self._events(net.parties[verifier.vf_id], start, kind="attestation",
                                      prover=step["prover"])
                expired = verifier.expire_challenges()
                self._settle()
                if any(e["accepted"] for e in events):
                    return "accepted"
                return "rejected" if events or step["prover"] not in expired else "rejected:timeout"
            if op == "detach":
                vf = self.vfs[step["vf"]]
                idx, is_nv = parse_index(step, "step")
                req = self.orc.request_pcr_detach(vf.vf_id, idx, is_nv)
                net.send(ORCHESTRATOR_ID, vf.vf_id, "DETACH", req)
                self._settle()
                if is_nv:
                    gone = all(h != idx for h, _ in vf.nvpcrs)
                    if gone:
                        return "detached"
                    return "orphaned" if not self.orc.records[vf.vf_id].mock.has(idx, True) else "timeout"
                if req.poison is not None:
                    verdict = self._verdict(orc_start, "DETACH", vf.vf_id, idx)
                    return "timeout" if verdict is None else ("detached" if verdict == "ok" else verdict)
                return "detached"
            if op == "mutate":
                vf = self.vfs[step["vf"]]
                idx, is_nv = parse_index(step, "step")
                digest = bytes.fromhex(step["digest"]) if "digest" in step else sha256(b"unsanctioned")
                # direct, unaudited extend by code running on the VF host
                if is_nv:
                    vf.tpm.nv_extend(idx, digest)
                else:
                    vf.tpm.pcr_extend(idx, digest)
                return "done"
            if op == "revoke":
                vf_id = step["vf"]
                notice = self.orc.revoke(vf_id)
                for peer in self.orc.chain_peers(vf_id):
                    net.send(ORCHESTRATOR_ID, peer, "ADVERTISE", notice)
                self._settle()
                return "revoked"
            if op == "replay":
                env = self.adversary.lookup(step["select"])
                if env is None:
                    return "nothing-to-replay"
                if "recipient" in step:
                    env = self.adversary.forge({"recipient": step["recipient"]}, env)
                net.seq += 1
                net.put(env.restamped(net.seq, net.tick), through_adversary=False)
                self._settle()
                return "sent"
            if op == "inject":
                env = self.adversary.forge(step["envelope"])
                if env is None:
                    return "nothing-to-inject"
                net.seq += 1
                net.put(env.restamped(net.seq, net.tick), through_adversary=False)
                self._settle()
                return "sent"
            if op == "freshness":
                return len(self.vfs[step["vf"]].unlocking_policies())
        except (OrchestratorError, AgentError) as exc:
            self._settle()
            return f"refused:{exc.code}"
        raise ScenarioError("step", f"unhandled op {op}")

    def checkpoint(self, index: int) -> None:
        self.trace.add({
            "kind": "checkpoint", "step": index, "tick": self.net.tick,
            "orchestrator": self.orc.export(),
            "vfs": {vf_id: vf.dump() for vf_id, vf in sorted(self.vfs.items())},
        })

    def run(self) -> RunResult:
        sc = self.scenario
        outcomes, timings, failure = [], [], None
        self.checkpoint(-1)
        for i, step in enumerate(sc.steps):
            started = time.perf_counter()
            outcome = self.run_step(step)
            timings.append((time.perf_counter() - started) * 1000)
            outcomes.append(outcome)
            ok = "expect" not in step or outcome_matches(step["expect"], outcome)
            self.trace.add({"kind": "result", "step": i, "op": step["op"], "outcome": outcome,
                            "expect": step.get("expect"), "ok": ok})
            self.checkpoint(i)
            problem = None if ok else f"step {i} ({step['op']}): expected {step['expect']!r}, got {outcome!r}"
            for name in sc.assertions:
                if problem is None:
                    message = self.check(name)
                    if message:
                        problem = f"step {i} ({step['op']}): assertion '{name}' failed: {message}"
            if problem:
                diff = {vf_id: self.state_diff(vf_id) for vf_id in sorted(self.vfs)}
                failure = {"step": i, "op": step["op"], "message": problem, "diff": diff}
                self.trace.add({"kind": "failure", "party": "engine", "code": "assertion", **failure})
                break
        passed = failure is None
        self.trace.add({"kind": "summary", "name": sc.name, "passed": passed,
                        "accepted": len(self.accepted), "violations": len(self.violations),
                        "steps_run": len(outcomes)})
        return RunResult(sc, passed, self.trace, outcomes, failure, timings,
                         list(self.accepted), list(self.violations))


def run_scenario(scenario: Scenario, seed: Optional[int] = None) -> RunResult:
    return ScenarioRun(scenario, seed).run()
