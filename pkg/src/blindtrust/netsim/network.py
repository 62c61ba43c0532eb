"""Deterministic message delivery with an adversary on the wire."""

from __future__ import annotations

from collections import deque
from typing import Callable

from ..messages import Message
from .adversary import Adversary
from .envelope import Envelope
from .parties import Party

MAX_DELIVERIES = 500


class Network:
    """FIFO delivery; one logical tick per delivered envelope."""

    def __init__(self, parties: dict[str, Party], adversary: Adversary,
                 log: Callable[[dict], None]):
        self.parties = parties
        self.adversary = adversary
        self.log = log
        self.tick = 0
        self.seq = 0
        self.queue: deque[Envelope] = deque()

    def send(self, sender: str, recipient: str, protocol: str, msg: Message) -> None:
        self.seq += 1
        env = Envelope(self.seq, self.tick, sender, recipient, protocol, type(msg).__name__,
                       msg.to_payload())
        self.put(env)

    def put(self, env: Envelope, through_adversary: bool = True) -> None:
        """Put an envelope on the wire; the adversary sees it first."""
        effective = self.adversary.process(env, self.log) if through_adversary else [env]
        for out in effective:
            if out is not env:
                self.seq += 1
                out = out.restamped(self.seq, self.tick)
            self.queue.append(out)

    def run(self) -> int:
        """Deliver until quiescent; returns the number of deliveries."""
        delivered = 0
        while self.queue:
            if delivered >= MAX_DELIVERIES:
                self.log({"kind": "failure", "party": "network", "code": "delivery-bound"})
                self.queue.clear()
                break
            env = self.queue.popleft()
            self.tick += 1
            delivered += 1
            self.log({"kind": "envelope", **env.to_json()})
            party = self.parties.get(env.recipient)
            if party is None:
                self.log({"kind": "failure", "party": "network", "code": "no-such-party",
                          "detail": env.recipient})
                continue
            before = len(party.events)
            replies = party.handle(env, self.tick)
            for event in party.events[before:]:
                record = {"kind": "event", "party": party.party_id, "event": event.get("kind")}
                record.update({k: v for k, v in event.items() if k != "kind"})
                self.log(record)
            for recipient, protocol, msg in replies:
                self.send(party.party_id, recipient, protocol, msg)
        return delivered
