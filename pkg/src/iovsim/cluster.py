"""In-memory PBFT harness with adversarial delivery order.

Unlike :mod:`iovsim.simnet`, there is no latency model here: every step the
harness picks one in-flight message uniformly at random (from a seeded
generator) and delivers it, so a run explores an arbitrary interleaving.
Timers only fire once the network is quiet, which models an asynchronous
period followed by eventual synchrony.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from .crypto import CryptoProvider, DeterministicProvider, SigningKey
from .ledger import Address, LedgerTransaction, Role, derive_address, genesis_state, make_genesis, make_registration
from .pbft import (
    ConsensusMessage,
    Effects,
    EquivocatingReplica,
    MsgKind,
    Replica,
    ReplyBody,
    ValidatorSetConfig,
    check_agreement,
    client_collect_replies,
    make_request,
)


@dataclass
class ClientState:
    key: SigningKey
    address: Address
    replies: dict[bytes, list[ConsensusMessage]] = field(default_factory=dict)
    accepted: dict[bytes, ReplyBody] = field(default_factory=dict)


class Cluster:
    def __init__(
        self,
        n: int = 4,
        *,
        seed: int = 0,
        byzantine: Optional[dict[int, str]] = None,
        crypto: Optional[CryptoProvider] = None,
        view_timeout: int = 50,
        checkpoint_interval: int = 16,
        timer_prob: float = 0.0,
        random_split: bool = False,
    ) -> None:
        self.crypto = crypto or DeterministicProvider(seed)
        self.rng = random.Random(seed)
        self.keys = [self.crypto.signing_key(f"rsu{i}") for i in range(n)]
        self.genesis = make_genesis(self.crypto, [(k, Role.RSU) for k in self.keys])
        state = genesis_state(self.genesis, self.crypto)
        addrs = tuple(derive_address(self.crypto, k.public) for k in self.keys)
        self.cfg = ValidatorSetConfig(addrs, view_timeout=view_timeout, checkpoint_interval=checkpoint_interval)
        self.byzantine = dict(byzantine or {})
        self.replicas: list[Replica] = []
        for i, key in enumerate(self.keys):
            kind = self.byzantine.get(i)
            if kind == "equivocate":
                split = self._random_split if random_split else None
                self.replicas.append(EquivocatingReplica(self.cfg, key, self.crypto, state, split=split))
            else:
                self.replicas.append(Replica(self.cfg, key, self.crypto, state))
        self.by_addr = {r.address: r for r in self.replicas}
        self.crashed = {i for i, kind in self.byzantine.items() if kind == "crash"}
        self.clients: dict[Address, ClientState] = {}
        self.inflight: list[tuple[Address, ConsensusMessage]] = []
        self.timers: dict[tuple[Address, str], int] = {}
        self.now = 0
        self.steps = 0
        self.timer_prob = timer_prob

    def _random_split(self, backups: list[Address]) -> set[Address]:
        return {a for a in backups if self.rng.random() < 0.5}

    @property
    def honest(self) -> list[Replica]:
        return [r for i, r in enumerate(self.replicas) if i not in self.byzantine]

    def add_client(self, label: str) -> ClientState:
        key = self.crypto.signing_key(label)
        client = ClientState(key, derive_address(self.crypto, key.public))
        self.clients[client.address] = client
        return client

    def registration_for(self, client: ClientState, role: Role = Role.VEHICLE) -> LedgerTransaction:
        return make_registration(self.crypto, client.key, role, sponsor_key=self.keys[0])

    def submit(self, client: ClientState, txs: Sequence[LedgerTransaction], timestamp: int = 0) -> ConsensusMessage:
        req = make_request(self.crypto, client.key, timestamp or self.now, txs)
        client.replies.setdefault(req.digest, [])
        for addr in self.cfg.validators:
            self.inflight.append((addr, req))
        return req

    def _apply(self, replica: Replica, fx: Effects) -> None:
        self.inflight.extend(fx.messages)
        for tid in fx.cancel_timers:
            self.timers.pop((replica.address, tid), None)
        for tid, delay in fx.set_timers:
            self.timers[(replica.address, tid)] = self.now + delay

    def _deliver(self, dst: Address, msg: ConsensusMessage) -> None:
        if dst in self.clients:
            client = self.clients[dst]
            if msg.kind is MsgKind.REPLY and msg.payload is not None:
                bucket = client.replies.setdefault(msg.payload.request, [])
                bucket.append(msg)
                result = client_collect_replies(bucket, self.cfg)
                if result is not None:
                    client.accepted.setdefault(msg.payload.request, result)
            return
        replica = self.by_addr.get(dst)
        if replica is None or self.cfg.validators.index(dst) in self.crashed:
            return
        self._apply(replica, replica.handle_message(msg, self.now))

    def step(self) -> bool:
        """Deliver one random message or fire the earliest timer; False when idle.

        With ``timer_prob`` > 0 a pending timer may fire while messages are
        still in flight, which forces view changes mid-protocol.
        """
        self.steps += 1
        fire_early = self.timers and self.timer_prob and self.rng.random() < self.timer_prob
        if self.inflight and not fire_early:
            i = self.rng.randrange(len(self.inflight))
            self.inflight[i], self.inflight[-1] = self.inflight[-1], self.inflight[i]
            dst, msg = self.inflight.pop()
            self._deliver(dst, msg)
            return True
        if not self.inflight and not any(self.cfg.validators.index(a) not in self.byzantine for a, _ in self.timers):
            # Only faulty replicas still have timers; the honest ones are quiet.
            return False
        (addr, tid), at = min(self.timers.items(), key=lambda kv: (kv[1], kv[0]))
        del self.timers[(addr, tid)]
        self.now = max(self.now, at)
        replica = self.by_addr[addr]
        if self.cfg.validators.index(addr) not in self.crashed:
            self._apply(replica, replica.handle_timeout(tid, self.now))
        return True

    def run(self, max_steps: int = 200_000, until_accepted: bool = False) -> int:
        start = self.steps
        while self.steps - start < max_steps:
            if until_accepted and self.all_accepted():
                break
            if not self.step():
                break
        return self.steps - start

    def all_accepted(self) -> bool:
        return all(set(c.replies) <= set(c.accepted) for c in self.clients.values())

    def disagreements(self) -> list:
        return check_agreement(self.honest)

    def max_view(self) -> int:
        return max(r.view for r in self.honest)


def enumerate_orders(
    build, *, limit: int = 100_000
) -> Iterator[Cluster]:
    """Depth-first enumeration of delivery orders for small instances.

    ``build()`` must return a fresh, identically initialised cluster with its
    requests already submitted.  Each yielded cluster is a completed run.
    Branching is over which in-flight message is delivered next; timers are
    not fired.  Stops after ``limit`` complete runs.
    """
    count = 0
    stack: list[list[int]] = [[]]
    while stack and count < limit:
        prefix = stack.pop()
        cluster = build()
        for choice in prefix:
            dst, msg = cluster.inflight.pop(choice)
            cluster._deliver(dst, msg)
        if not cluster.inflight:
            count += 1
            yield cluster
            continue
        for choice in reversed(range(len(cluster.inflight))):
            stack.append(prefix + [choice])
