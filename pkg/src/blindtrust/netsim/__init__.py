"""In-memory transport, Dolev-Yao adversary and scenario engine."""

from .adversary import Adversary, Rule, ScriptError
from .envelope import PROTOCOLS, Envelope, canonical_json
from .network import Network
from .scenario import (
    RunResult,
    Scenario,
    ScenarioError,
    Trace,
    load_scenario,
    parse_scenario,
    run_scenario,
)

__all__ = [
    "Adversary", "Envelope", "Network", "PROTOCOLS", "Rule", "RunResult", "Scenario",
    "ScenarioError", "ScriptError", "Trace", "canonical_json", "load_scenario",
    "parse_scenario", "run_scenario",
]
