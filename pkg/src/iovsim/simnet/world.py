"""Deterministic discrete-event network.

Time is an integer tick.  Events run in ``(at, seq)`` order, where ``seq`` is
assigned at scheduling time, so two events at the same tick run in the order
they were scheduled.

Packets are source-routed hop by hop.  Each hop crosses a :class:`LinkSpec`
(latency, loss, link adversaries), lands in the next node's bounded inbox and
waits to be serviced; a node services at most ``service_rate`` packets per
tick and, when its inbox is full, discards the oldest queued packet.  Relay
nodes apply relay adversaries before forwarding.

Every packet ends in exactly one terminal trace event: ``deliver``, ``drop``
(with ``cause`` ``loss`` or ``adversary``) or ``expire``.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Any, Callable, Optional

from .adversary import AdversarySpec, Verdict, apply_adversary


class PastEvent(ValueError):
    pass


class EventKind(str, Enum):
    DELIVER = "deliver"
    TIMER = "timer"
    ACTION = "action"
    SERVICE = "service"


@dataclass(order=True)
class SimEvent:
    at: int
    seq: int
    kind: EventKind = field(compare=False)
    node: str = field(compare=False)
    data: Any = field(compare=False, default=None)
    provenance: str = field(compare=False, default="")


@dataclass
class LinkSpec:
    a: str
    b: str
    latency: int = 1
    loss_prob: float = 0.0
    up: bool = True
    jitter: int = 0

    def __post_init__(self) -> None:
        if self.latency < 0 or self.jitter < 0:
            raise ValueError("latency and jitter must be non-negative")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be in [0, 1]")

    @property
    def key(self) -> frozenset:
        return frozenset((self.a, self.b))


@dataclass
class Packet:
    pid: int
    src: str
    dst: str
    path: tuple[str, ...]
    channel: str
    body: bytes
    sent_at: int
    hop: int = 0
    latency_floor: int = 0
    origin: str = ""


class Node:
    """Base class for anything attached to the network."""

    relay = False

    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        self.world: Optional["World"] = None
        self.inbox: deque[Packet] = deque()
        self.service_scheduled = False
        self.processed = 0

    def on_start(self) -> None:
        pass

    def receive(self, packet: Packet) -> None:
        pass

    def on_timer(self, timer_id: str) -> None:
        pass


def stream_seed(seed: int, key: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{key}".encode()).digest()[:8], "big")


class World:
    def __init__(
        self,
        seed: int = 0,
        *,
        inbox_capacity: int = 256,
        service_rate: int = 64,
        trace_sink: Optional[IO[str]] = None,
        keep_trace: bool = True,
    ) -> None:
        if inbox_capacity < 1 or service_rate < 1:
            raise ValueError("inbox_capacity and service_rate must be positive")
        self.seed = seed
        self.now = 0
        self.inbox_capacity = inbox_capacity
        self.service_rate = service_rate
        self.nodes: dict[str, Node] = {}
        self.links: dict[frozenset, LinkSpec] = {}
        self.attachment: dict[str, str] = {}
        self.backbone: set[str] = set()
        self.link_adversaries: dict[frozenset, list[AdversarySpec]] = {}
        self.relay_adversaries: dict[str, list[AdversarySpec]] = {}
        self.adversary_context: dict[str, Any] = {}
        # Packets each on-path adversary got to decide on, by name.
        self.adversary_seen: Counter[str] = Counter()
        self.action_handler: Optional[Callable[[Any], None]] = None
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._pid = 0
        self._timers: dict[tuple[str, str], int] = {}
        self._streams: dict[str, random.Random] = {}
        self._link_clock: dict[tuple[str, str], int] = {}
        self._trace_seq = 0
        self.trace: list[dict] = []
        self.keep_trace = keep_trace
        self.trace_sink = trace_sink

    # randomness and tracing

    def rng(self, key: str) -> random.Random:
        """Independent seeded stream per stable key (node, link or adversary)."""
        stream = self._streams.get(key)
        if stream is None:
            stream = self._streams[key] = random.Random(stream_seed(self.seed, key))
        return stream

    def emit(self, kind: str, node: str, **fields: Any) -> dict:
        record = {"t": self.now, "n": self._trace_seq, "kind": kind, "node": node, **fields}
        self._trace_seq += 1
        if self.keep_trace:
            self.trace.append(record)
        if self.trace_sink is not None:
            self.trace_sink.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
        return record

    # topology

    def add_node(self, node: Node, *, backbone: bool = False) -> Node:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node {node.node_id!r}")
        node.world = self
        self.nodes[node.node_id] = node
        if backbone:
            self.backbone.add(node.node_id)
        return node

    def add_link(self, link: LinkSpec) -> LinkSpec:
        self.links[link.key] = link
        return link

    def link(self, a: str, b: str) -> Optional[LinkSpec]:
        return self.links.get(frozenset((a, b)))

    def attach(self, endpoint: str, access_node: str, template: LinkSpec) -> None:
        old = self.attachment.get(endpoint)
        if old is not None:
            self.links.pop(frozenset((endpoint, old)), None)
        self.attachment[endpoint] = access_node
        self.add_link(LinkSpec(endpoint, access_node, template.latency, template.loss_prob, True, template.jitter))

    def route(self, src: str, dst: str, dst_access: Optional[str] = None) -> list[str]:
        """Endpoint -> access node -> (backbone mesh) -> access node -> endpoint.

        ``dst_access`` overrides the destination's access node, as when the
        sender routes by a (possibly stale) resolved locator.
        """
        if src == dst:
            return [src]
        hops = [src]
        if src not in self.backbone:
            hops.append(self.attachment.get(src, ""))
        if dst not in self.backbone:
            hops.append(dst_access or self.attachment.get(dst, ""))
        hops.append(dst)
        path: list[str] = []
        for h in hops:
            if not path or path[-1] != h:
                path.append(h)
        return path

    # scheduling

    def schedule(self, at: int, kind: EventKind, node: str, data: Any = None, provenance: str = "") -> SimEvent:
        if at < self.now:
            raise PastEvent(f"event at {at} is before now={self.now}")
        event = SimEvent(at, self._seq, kind, node, data, provenance)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def set_timer(self, node: str, timer_id: str, delay: int) -> None:
        event = self.schedule(self.now + max(delay, 0), EventKind.TIMER, node, timer_id)
        self._timers[(node, timer_id)] = event.seq

    def cancel_timer(self, node: str, timer_id: str) -> None:
        self._timers.pop((node, timer_id), None)

    def at(self, when: int, action: Any, provenance: str = "scenario") -> None:
        self.schedule(when, EventKind.ACTION, provenance, action, provenance)

    # packets

    def send(self, src: str, dst: str, channel: str, body: bytes, *, origin: str = "", via: Optional[str] = None) -> int:
        path = tuple(self.route(src, dst, via))
        self._pid += 1
        pid = self._pid
        floor = 0
        for a, b in zip(path, path[1:]):
            link = self.link(a, b)
            floor += link.latency if link is not None else 0
        packet = Packet(pid, src, dst, path, channel, bytes(body), self.now, 0, floor, origin or src)
        self.emit("send", src, pid=pid, dst=dst, channel=channel, size=len(body), path=list(path), floor=floor)
        if len(path) == 1:
            self.schedule(self.now, EventKind.DELIVER, dst, packet, src)
        else:
            self._transmit(packet)
        return pid

    def _terminal(self, kind: str, packet: Packet, node: str, **fields: Any) -> None:
        self.emit(kind, node, pid=packet.pid, channel=packet.channel, **fields)

    def _transmit(self, packet: Packet) -> None:
        here, nxt = packet.path[packet.hop], packet.path[packet.hop + 1]
        link = self.link(here, nxt)
        if link is None or not link.up or nxt not in self.nodes:
            self._terminal("drop", packet, here, cause="loss", reason="no_link", hop=nxt)
            return
        if link.loss_prob and self.rng(f"link:{min(here, nxt)}|{max(here, nxt)}").random() < link.loss_prob:
            self._terminal("drop", packet, here, cause="loss", reason="loss", hop=nxt)
            return
        for spec in self.link_adversaries.get(link.key, ()):
            if not spec.active(self.now):
                continue
            if not spec.channels or packet.channel in spec.channels:
                self.adversary_seen[spec.name] += 1
            verdict = apply_adversary(spec, packet.channel, packet.body, self.rng(f"adv:{spec.name}"), self.adversary_context)
            if not self._apply_verdict(spec, verdict, packet, here):
                return
        delay = link.latency
        if link.jitter:
            delay += self.rng(f"jitter:{min(here, nxt)}|{max(here, nxt)}").randint(0, link.jitter)
        # Links are FIFO: a packet never overtakes an earlier one on the same direction.
        arrive = max(self.now + delay, self._link_clock.get((here, nxt), 0))
        self._link_clock[(here, nxt)] = arrive
        packet.hop += 1
        self.schedule(arrive, EventKind.DELIVER, nxt, packet, here)

    def _apply_verdict(self, spec: AdversarySpec, verdict: Verdict, packet: Packet, here: str) -> bool:
        """Apply an adversary decision; return False if the packet is gone."""
        if verdict.action == "forward":
            return True
        self.emit("adversary", spec.name, action=verdict.action, adv=spec.kind.value, pid=packet.pid, channel=packet.channel, detail=verdict.detail)
        if verdict.action == "drop":
            self._terminal("drop", packet, here, cause="adversary", adv=spec.name)
            return False
        if verdict.action == "replace":
            packet.body = verdict.bodies[0]
            return True
        if verdict.action == "duplicate":
            packet.body = verdict.bodies[0]
            for extra in verdict.bodies[1:]:
                self.inject(spec.name, packet.dst, packet.channel, extra, path=packet.path[packet.hop :], origin=packet.origin)
            return True
        raise ValueError(f"unknown adversary action {verdict.action!r}")

    def inject(self, by: str, dst: str, channel: str, body: bytes, *, path: tuple[str, ...], origin: str) -> int:
        """Adversary-originated copy entering the network mid-path."""
        self._pid += 1
        packet = Packet(self._pid, by, dst, tuple(path), channel, bytes(body), self.now, 0, 0, origin)
        self.emit("send", by, pid=packet.pid, dst=dst, channel=channel, size=len(body), path=list(path), floor=0, injected=True)
        if len(path) == 1:
            self.schedule(self.now, EventKind.DELIVER, dst, packet, by)
        else:
            self._transmit(packet)
        return packet.pid

    def _arrive(self, node: Node, packet: Packet) -> None:
        if len(node.inbox) >= self.inbox_capacity:
            victim = node.inbox.popleft()
            self._terminal("expire", victim, node.node_id)
        node.inbox.append(packet)
        if not node.service_scheduled:
            node.service_scheduled = True
            self.schedule(self.now, EventKind.SERVICE, node.node_id)

    def _service(self, node: Node) -> None:
        node.service_scheduled = False
        for _ in range(min(self.service_rate, len(node.inbox))):
            packet = node.inbox.popleft()
            node.processed += 1
            if packet.hop == len(packet.path) - 1:
                self._terminal("deliver", packet, node.node_id, src=packet.src, sent_at=packet.sent_at, floor=packet.latency_floor)
                node.receive(packet)
            else:
                self._relay(node, packet)
        if node.inbox and not node.service_scheduled:
            node.service_scheduled = True
            self.schedule(self.now + 1, EventKind.SERVICE, node.node_id)

    def _relay(self, node: Node, packet: Packet) -> None:
        if not node.relay:
            self._terminal("drop", packet, node.node_id, cause="loss", reason="not_a_relay")
            return
        for spec in self.relay_adversaries.get(node.node_id, ()):
            if not spec.active(self.now):
                continue
            if not spec.channels or packet.channel in spec.channels:
                self.adversary_seen[spec.name] += 1
            verdict = apply_adversary(spec, packet.channel, packet.body, self.rng(f"adv:{spec.name}"), self.adversary_context)
            if not self._apply_verdict(spec, verdict, packet, node.node_id):
                return
        self._transmit(packet)

    # main loop

    def start(self) -> None:
        for node_id in sorted(self.nodes):
            self.nodes[node_id].on_start()

    def step(self) -> bool:
        if not self._queue:
            return False
        event = heapq.heappop(self._queue)
        self.now = event.at
        if event.kind is EventKind.DELIVER:
            node = self.nodes.get(event.node)
            if node is None:
                self._terminal("drop", event.data, event.provenance, cause="loss", reason="no_node")
            else:
                self._arrive(node, event.data)
        elif event.kind is EventKind.SERVICE:
            self._service(self.nodes[event.node])
        elif event.kind is EventKind.TIMER:
            if self._timers.get((event.node, event.data)) == event.seq:
                del self._timers[(event.node, event.data)]
                self.nodes[event.node].on_timer(event.data)
        elif event.kind is EventKind.ACTION:
            if self.action_handler is not None:
                self.action_handler(event.data)
        return True

    def run_until(self, t_end: int) -> list[dict]:
        while self._queue and self._queue[0].at <= t_end:
            self.step()
        self.now = max(self.now, t_end) if not self._queue or self._queue[0].at > t_end else self.now
        return self.trace

    def pending_events(self) -> int:
        return len(self._queue)

    def in_flight(self) -> int:
        """Packets scheduled or queued but not yet terminal."""
        queued = sum(len(n.inbox) for n in self.nodes.values())
        scheduled = sum(1 for e in self._queue if e.kind is EventKind.DELIVER)
        return queued + scheduled
