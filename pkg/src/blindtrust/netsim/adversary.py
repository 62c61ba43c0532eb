"""A scriptable Dolev-Yao network adversary.

The adversary sees every envelope, remembers all of them, and may drop,
replay, tamper with or inject messages.  It holds no key material, so any
signature or MAC it produces is either copied from an observed envelope or
garbage.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional

from .envelope import Envelope

ACTIONS = ("pass", "drop", "replay", "tamper", "inject")
MATCH_KEYS = ("protocol", "step", "sender", "recipient")


class ScriptError(ValueError):
    """An adversary script does not validate."""


def _matches(match: dict, env: Envelope) -> bool:
    return all(getattr(env, key) == value for key, value in match.items())


def _flip_bit(value):
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value ^ 1
    if isinstance(value, str):
        try:
            raw = bytearray(bytes.fromhex(value))
        except ValueError:
            return value + "~"
        if not raw:
            return "00"
        raw[-1] ^= 0x01
        return raw.hex()
    raise ScriptError(f"cannot flip a bit of {type(value).__name__}")


@dataclass
class Rule:
    match: dict
    action: str
    times: Optional[int] = None
    skip: int = 0
    select: dict = field(default_factory=dict)
    replace: bool = False
    set: dict = field(default_factory=dict)
    flip: list = field(default_factory=list)
    envelope: Optional[dict] = None
    seen: int = 0
    fired: int = 0

    @classmethod
    def from_json(cls, data: dict, where: str) -> "Rule":
        if not isinstance(data, dict):
            raise ScriptError(f"{where}: rule must be an object")
        action = data.get("action")
        if action not in ACTIONS:
            raise ScriptError(f"{where}: unknown action {action!r}")
        match = data.get("match", {})
        if not isinstance(match, dict) or any(k not in MATCH_KEYS for k in match):
            raise ScriptError(f"{where}: match keys must be among {', '.join(MATCH_KEYS)}")
        rule = cls(
            match=dict(match), action=action, times=data.get("times"), skip=int(data.get("skip", 0)),
            select=dict(data.get("select", {})), replace=bool(data.get("replace", False)),
            set=dict(data.get("set", {})), flip=list(data.get("flip", [])), envelope=data.get("envelope"),
        )
        if action == "tamper" and not (rule.set or rule.flip):
            raise ScriptError(f"{where}: tamper needs 'set' or 'flip'")
        if action == "replay" and not rule.select:
            raise ScriptError(f"{where}: replay needs 'select'")
        if action == "inject" and rule.envelope is None and not rule.select:
            raise ScriptError(f"{where}: inject needs 'envelope' or 'select'")
        return rule

    def to_json(self) -> dict:
        out = {"match": self.match, "action": self.action}
        for key in ("times", "select", "set", "flip", "envelope"):
            value = getattr(self, key)
            if value:
                out[key] = value
        if self.skip:
            out["skip"] = self.skip
        if self.replace:
            out["replace"] = True
        return out


class Adversary:
    """Applies the first matching rule to each envelope put on the wire."""

    def __init__(self, rules: Optional[list[Rule]] = None):
        self.rules = rules or []
        self.knowledge: list[Envelope] = []

    @classmethod
    def from_json(cls, data) -> "Adversary":
        if data is None:
            return cls()
        if not isinstance(data, dict) or not isinstance(data.get("rules", []), list):
            raise ScriptError("adversary: expected an object with a 'rules' list")
        return cls([Rule.from_json(r, f"adversary.rules[{i}]") for i, r in enumerate(data.get("rules", []))])

    def lookup(self, select: dict) -> Optional[Envelope]:
        """Find an observed envelope: by ``seq`` or by match fields plus ``index``."""
        if "seq" in select:
            for env in self.knowledge:
                if env.seq == select["seq"]:
                    return env
            return None
        match = {k: v for k, v in select.items() if k in MATCH_KEYS}
        found = [env for env in self.knowledge if _matches(match, env)]
        index = select.get("index", -1)
        try:
            return found[index]
        except IndexError:
            return None

    def forge(self, spec: dict, observed: Optional[Envelope] = None) -> Optional[Envelope]:
        """Build an envelope from observed material and/or literal fields."""
        if observed is None and "select" in spec:
            observed = self.lookup(spec["select"])
            if observed is None:
                return None
        base = observed.to_json() if observed else {"seq": 0, "tick": 0, "payload": {}}
        base = copy.deepcopy(base)
        for key in ("sender", "recipient", "protocol", "step"):
            if key in spec:
                base[key] = spec[key]
        base["payload"].update(copy.deepcopy(spec.get("payload", {})))
        try:
            return Envelope.from_json(base)
        except ValueError:
            return None

    def process(self, env: Envelope, log: Callable[[dict], None]) -> list[Envelope]:
        self.knowledge.append(env)
        for i, rule in enumerate(self.rules):
            if not _matches(rule.match, env):
                continue
            rule.seen += 1
            if rule.seen <= rule.skip or (rule.times is not None and rule.fired >= rule.times):
                continue
            rule.fired += 1
            out = self._apply(rule, env)
            log({"kind": "adversary", "rule": i, "action": rule.action, "seq": env.seq,
                 "emits": len(out)})
            return out
        return [env]

    def _apply(self, rule: Rule, env: Envelope) -> list[Envelope]:
        if rule.action == "pass":
            return [env]
        if rule.action == "drop":
            return []
        if rule.action == "tamper":
            payload = copy.deepcopy(env.payload)
            payload.update(copy.deepcopy(rule.set))
            for key in rule.flip:
                if key in payload:
                    payload[key] = _flip_bit(payload[key])
            return [Envelope(env.seq, env.tick, env.sender, env.recipient, env.protocol, env.step, payload)]
        if rule.action == "replay":
            stored = self.lookup(rule.select)
            extra = [stored] if stored is not None else []
            return extra if rule.replace else [env] + extra
        # inject
        forged = self.forge({"select": rule.select, **(rule.envelope or {})} if rule.select
                            else rule.envelope)
        extra = [forged] if forged is not None else []
        return extra if rule.replace else [env] + extra
