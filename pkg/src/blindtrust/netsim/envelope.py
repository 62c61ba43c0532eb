"""Wire envelopes: one protocol message in transit between two parties."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

PROTOCOLS = ("ENROLL", "UPDATE", "ORA", "ATTACH", "DETACH", "ADVERTISE")


def canonical_json(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Envelope:
    seq: int
    tick: int
    sender: str
    recipient: str
    protocol: str
    step: str
    payload: dict

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "Envelope":
        try:
            return cls(int(data["seq"]), int(data["tick"]), str(data["sender"]), str(data["recipient"]),
                       str(data["protocol"]), str(data["step"]), dict(data["payload"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed envelope: {exc}") from exc

    def canonical(self) -> str:
        return canonical_json(self.to_json())

    def with_payload(self, **fields) -> "Envelope":
        payload = dict(self.payload)
        payload.update(fields)
        return replace(self, payload=payload)

    def restamped(self, seq: int, tick: int) -> "Envelope":
        return replace(self, seq=seq, tick=tick)
