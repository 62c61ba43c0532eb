"""End-to-end acceptance checks; each test prints one pass/fail line."""

import ast
import inspect
import random
import subprocess
import sys
import textwrap
import time

import oracles
from blindtrust import agent
from blindtrust.bench import PROTOCOLS as BENCH_ROWS
from blindtrust.bench import run_bench
from blindtrust.messages import ChallengeResponse
from blindtrust.netsim import load_scenario, run_scenario
from blindtrust.netsim.scenario import outcome_matches
from blindtrust.orchestrator import MockNvEntry, MockState, compose_policy, expected_audit_digest
from blindtrust.vtpm import NV_INDEX_FIRST, NVPCR_ATTRS, PCR_COUNT, NvTemplate, VTpm, decode_attest, nv_name
from conftest import ROOT, SCENARIOS, record_criterion

CASES = 1000
EXCHANGES = ("enroll", "update", "ora", "attach", "detach")
ATTACKS = ("drop", "tamper", "replay", "inject")


def _digests(rng, n):
    return [rng.randbytes(32) for _ in range(n)]


def _random_state(rng, case):
    """A vTPM with random PCR/NV contents plus the matching mock state."""
    tpm = VTpm(seed=case)
    mock = MockState()
    for idx in rng.sample(range(PCR_COUNT), rng.randint(0, 8)):
        chain = _digests(rng, rng.randint(1, 3))
        for d in chain:
            tpm.pcr_extend(idx, d)
        mock.pcrs[idx] = oracles.extend_chain(chain)
    for handle in rng.sample(range(NV_INDEX_FIRST, NV_INDEX_FIRST + 64), rng.randint(0, 4)):
        policy = rng.randbytes(32)
        tpm.nv_define_space(handle, NvTemplate(NVPCR_ATTRS), policy)
        chain = _digests(rng, rng.randint(1, 3))
        for d in chain:
            tpm.nv_extend(handle, d)
        name = nv_name(handle, NvTemplate(NVPCR_ATTRS), policy, written=True)
        mock.nvpcrs.append(MockNvEntry(handle, oracles.extend_chain(chain), name))
    return tpm, mock


def test_criterion_1_policy_closure():
    rng = random.Random(1)
    start = time.perf_counter()
    mismatches = 0
    for case in range(CASES):
        tpm, mock = _random_state(rng, case)
        session, _ = tpm.start_auth_session("POLICY")
        for entry in mock.nvpcrs:
            tpm.policy_nv(session, entry.handle, entry.value)
        if mock.pcrs:
            tpm.policy_pcr(session, sorted(mock.pcrs))
        live = tpm.session_state(session).policy_digest
        oracle = oracles.policy_fold([(e.value, e.name) for e in mock.nvpcrs], mock.pcrs)
        if not compose_policy(mock) == live == oracle:
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    record_criterion(1, "policy closure", ok, f"{CASES} states, {mismatches} mismatches, {elapsed:.2f}s")
    assert ok


def test_criterion_2_audit_closure():
    rng = random.Random(2)
    tpm = VTpm(seed=b"audit")
    ek = tpm.create_primary("endorsement")
    names = {}
    for i in range(4):
        handle = NV_INDEX_FIRST + 0x100 + i
        policy = rng.randbytes(32)
        tpm.nv_define_space(handle, NvTemplate(NVPCR_ATTRS), policy)
        tpm.nv_extend(handle, bytes(32))
        names[handle] = nv_name(handle, NvTemplate(NVPCR_ATTRS), policy, written=True)
    mismatches = branches = 0
    for case in range(CASES):
        digest = rng.randbytes(32)
        session, _ = tpm.start_auth_session("HMAC")
        if case % 2:
            handle = rng.choice(sorted(names))
            tpm.nv_extend(handle, digest, audit_session=session)
            expected = expected_audit_digest(handle, True, digest, names[handle])
            oracle = oracles.audit_nv(names[handle], digest)
        else:
            idx = rng.randrange(PCR_COUNT)
            tpm.pcr_extend(idx, digest, audit_session=session)
            expected = expected_audit_digest(idx, False, digest)
            oracle = oracles.audit_pcr(idx, digest)
        info, _ = tpm.get_session_audit_digest(ek, session)
        tpm.flush_context(session)
        branches += case % 2
        if not expected == decode_attest(info).h_session == oracle:
            mismatches += 1
    ok = mismatches == 0
    record_criterion(2, "audit closure", ok,
                     f"{CASES} extends ({branches} NV, {CASES - branches} PCR), {mismatches} mismatches")
    assert ok


def test_criterion_3_happy_path():
    path = SCENARIOS / "happy_path.json"
    proc = subprocess.run([sys.executable, "-m", "blindtrust", "scenario", "run", str(path)],
                          capture_output=True, text=True, cwd=ROOT)
    scenario = load_scenario(path)
    result = run_scenario(scenario)
    ops = [s["op"] for s in scenario.steps]
    shape = (ops.count("enroll") >= 1 and ops.count("attach") == 2 and ops.count("update") == 3
             and "attest" in ops and "detach" in ops and "sync" in scenario.assertions)
    ok = proc.returncode == 0 and result.passed and shape
    record_criterion(3, "happy path end to end", ok, f"exit {proc.returncode}, outcomes {result.outcomes}")
    assert ok, proc.stdout + proc.stderr


def _structurally_oblivious() -> bool:
    params = list(inspect.signature(agent.verify_attestation).parameters)
    source = textwrap.dedent(inspect.getsource(agent.VirtualFunction.check_response))
    touched = {node.attr for node in ast.walk(ast.parse(source))
               if isinstance(node, ast.Attribute) and isinstance(node.value, ast.Name) and node.value.id == "self"}
    fields = list(ChallengeResponse.__dataclass_fields__)
    return params == ["ak_public", "nonce", "signature"] and touched <= {"pending_challenges", "peers"} \
        and fields == ["signature"]


def test_criterion_4_property_suite():
    expectations = {
        "prop_tampered_measurement": "rejected:audit-digest",
        "prop_forged_ak_certificate": "rejected:signature",
        "prop_post_update_mutation": "rejected",
        "prop_superseding_policy": 1,
        "prop_oblivious_verifier": "rejected",
    }
    failed = []
    for name, outcome in expectations.items():
        result = run_scenario(load_scenario(SCENARIOS / f"{name}.json"))
        seen = any(outcome_matches(outcome, o) for o in result.outcomes)
        if not result.passed or not seen or result.violations:
            failed.append(name)
        if name == "prop_post_update_mutation" and not any(
                line.get("event") == "failure" and line.get("code") == "attestation-failed"
                for line in result.trace.lines):
            failed.append(f"{name} (no attestation-failed from the prover)")
    if not _structurally_oblivious():
        failed.append("verifier-structure")
    ok = not failed
    record_criterion(4, "security property scenarios", ok,
                     f"{len(expectations)} scenarios plus verifier structure" + (f", failed {failed}" if failed else ""))
    assert ok


def test_criterion_5_hazard_and_fix():
    hazard = run_scenario(load_scenario(SCENARIOS / "hazard_disjoint_policies.json"))
    fixed = run_scenario(load_scenario(SCENARIOS / "hazard_supersession_fix.json"))
    unlock_hazard = [o for o, s in zip(hazard.outcomes, hazard.scenario.steps) if s["op"] == "freshness"]
    unlock_fixed = [o for o, s in zip(fixed.outcomes, fixed.scenario.steps) if s["op"] == "freshness"]
    ok = hazard.passed and fixed.passed and unlock_hazard == [2] and unlock_fixed == [1]
    record_criterion(5, "overlapping policy hazard and supersession fix", ok,
                     f"unlocking policies without rule {unlock_hazard}, with rule {unlock_fixed}")
    assert ok


def _attacks(path, data) -> set[str]:
    found = {r["action"] for r in data.get("rules", [])} if data else set()
    found |= {s["op"] for s in load_scenario(path).steps if s["op"] in ("replay", "inject")}
    return found & set(ATTACKS)


def test_criterion_6_adversary_sweep_and_bench():
    files = sorted((SCENARIOS / "adversary").glob("*.json"))
    coverage = {(x, a): 0 for x in EXCHANGES for a in ATTACKS}
    unexpected, violations, accepted = [], 0, 0
    for path in files:
        scenario = load_scenario(path)
        result = run_scenario(scenario)
        violations += len(result.violations)
        accepted += len(result.accepted)
        if not result.as_expected:
            unexpected.append(path.stem)
        exchange = path.stem.split("_")[0]
        for attack in _attacks(path, scenario.adversary):
            if (exchange, attack) in coverage:
                coverage[(exchange, attack)] += 1
    missing = [f"{x}/{a}" for (x, a), n in coverage.items() if not n]
    report = run_bench(iterations=20)
    ora = next(r for r in report.rows if r.protocol == "ORA (prover)")
    table_ok = [r.protocol for r in report.rows] == list(BENCH_ROWS) and all(r.commands for r in report.rows)
    ok = len(files) >= 15 and not unexpected and violations == 0 and not missing and table_ok and ora.mean_ms < 50
    record_criterion(6, "adversary sweep and timing table", ok,
                     f"{len(files)} attacks, {accepted} accepts, {violations} unsound, "
                     f"uncovered {missing or 'none'}, ORA {ora.mean_ms:.2f} ms")
    assert ok, unexpected


def test_criterion_7_determinism(tmp_path):
    path = SCENARIOS / "happy_path.json"
    traces = []
    for i in range(2):
        out = tmp_path / f"run{i}.jsonl"
        subprocess.run([sys.executable, "-m", "blindtrust", "scenario", "run", str(path), "--seed", "5",
                        "--trace", str(out)], check=True, capture_output=True)
        traces.append(out.read_bytes())
    differing = [p.stem for p in sorted(SCENARIOS.rglob("*.json"))
                 if run_scenario(load_scenario(p)).trace.to_jsonl() != run_scenario(load_scenario(p)).trace.to_jsonl()]
    ok = traces[0] == traces[1] and len(traces[0]) > 0 and not differing
    record_criterion(7, "deterministic traces", ok,
                     f"two processes byte-identical={traces[0] == traces[1]}, corpus reruns differing={differing}")
    assert ok
