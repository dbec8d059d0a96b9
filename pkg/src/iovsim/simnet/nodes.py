"""Simulated nodes.

Channels carried by packets:

``pbft``    ConsensusMessage (requests, phases, replies)
``hs``      BiSA HandshakeMessage
``rec``     sealed BiSA record carrying a gateway envelope
``raw``     unauthenticated plaintext (only adversaries send these)
``dbnr_q``  / ``dbnr_a``  resolver query and answer
``block``   executed block pushed by a validator to light clients
``junk``    flood traffic
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import bisa
from ..crypto import CryptoProvider, SigningKey
from ..dbnr import (
    DEFAULT_EXPIRY,
    AnswerStatus,
    DbnrAnswer,
    DbnrQuery,
    ResolverCache,
    answer_query,
    make_upsert,
    record_is_authentic,
    refresh_cache,
)
from ..encoding import DecodeError
from ..ledger import (
    INFRASTRUCTURE,
    Address,
    Block,
    Layer,
    LedgerError,
    LedgerState,
    LedgerTransaction,
    Locator,
    Registration,
    Role,
    TxKind,
    append_block,
    derive_address,
    endorsement_bytes,
    make_registration,
    make_revocation,
    sign_transaction,
)
from ..pbft import (
    ConsensusMessage,
    Effects,
    MsgKind,
    Replica,
    ValidatorSetConfig,
    client_collect_replies,
    make_request,
)
from ..vehicle import (
    Blocked,
    BusError,
    DecisionInput,
    Sensitivity,
    VehicleBus,
    decision_filter,
    decode_envelope,
    encode_envelope,
    export_component,
    gateway_ingress,
    input_from,
)
from .world import Node, Packet, World

CLIENT_TIMEOUT = 200
HANDSHAKE_TIMEOUT = 120
HANDSHAKE_RETRIES = 2
REFRESH_MARGIN = 100
MAX_REQUEST_TRIES = 8


@dataclass
class SimContext:
    """Shared, read-mostly simulation environment."""

    world: World
    crypto: CryptoProvider
    cfg: ValidatorSetConfig
    genesis: LedgerState
    directory: dict[Address, str] = field(default_factory=dict)
    validator_nodes: list[str] = field(default_factory=list)
    light_clients: list[str] = field(default_factory=list)
    dbnr_expiry: int = DEFAULT_EXPIRY
    adversary_keys: list[bytes] = field(default_factory=list)

    def node_of(self, address: Address) -> Optional[str]:
        return self.directory.get(address)


def _hex(b: bytes) -> str:
    return b.hex()


@dataclass
class PendingRequest:
    msg: ConsensusMessage
    tag: str
    sent_at: int
    on_done: Optional[Callable[[bool, tuple[str, ...]], None]] = None
    replies: list[ConsensusMessage] = field(default_factory=list)
    tries: int = 1


class ProtocolNode(Node):
    """A node with an identity that can act as a PBFT client."""

    def __init__(self, node_id: str, ctx: SimContext, key: Optional[SigningKey]) -> None:
        super().__init__(node_id)
        self.ctx = ctx
        self.key = key
        self.address = derive_address(ctx.crypto, key.public) if key is not None else b""
        self.requests: dict[bytes, PendingRequest] = {}

    @property
    def now(self) -> int:
        return self.ctx.world.now

    def emit(self, kind: str, **fields) -> None:
        self.ctx.world.emit(kind, self.node_id, **fields)

    def send(self, dst: str, channel: str, body: bytes, via: Optional[str] = None) -> int:
        return self.ctx.world.send(self.node_id, dst, channel, body, via=via)

    def ledger_view(self) -> LedgerState:
        raise NotImplementedError

    # PBFT client

    def submit(
        self,
        txs: list[LedgerTransaction],
        tag: str,
        on_done: Optional[Callable[[bool, tuple[str, ...]], None]] = None,
    ) -> bytes:
        msg = make_request(self.ctx.crypto, self.key, self.now, txs)
        self.requests[msg.digest] = PendingRequest(msg, tag, self.now, on_done)
        self.emit("request", digest=_hex(msg.digest)[:16], tag=tag, ntx=len(txs))
        self._broadcast_request(msg)
        self.ctx.world.set_timer(self.node_id, f"req:{_hex(msg.digest)[:16]}", CLIENT_TIMEOUT)
        return msg.digest

    def _broadcast_request(self, msg: ConsensusMessage) -> None:
        body = msg.encode()
        for v in self.ctx.validator_nodes:
            self.send(v, "pbft", body)

    def _on_reply(self, msg: ConsensusMessage) -> None:
        body = msg.payload
        pending = self.requests.get(body.request) if body is not None else None
        if pending is None or msg.kind is not MsgKind.REPLY:
            return
        sender = self.ctx.genesis.identity(msg.sender)
        if sender is None or not self.ctx.crypto.verify(sender.verify_key, msg.signing_bytes(), msg.signature):
            self.emit("reject", channel="pbft", reason="BadReplySignature")
            return
        pending.replies.append(msg)
        result = client_collect_replies(pending.replies, self.ctx.cfg)
        if result is None:
            return
        del self.requests[body.request]
        self.ctx.world.cancel_timer(self.node_id, f"req:{_hex(body.request)[:16]}")
        self.emit(
            "client_accept",
            digest=_hex(body.request)[:16],
            tag=pending.tag,
            accepted=result.accepted,
            outcomes=list(result.outcomes),
            latency=self.now - pending.sent_at,
        )
        if pending.on_done is not None:
            pending.on_done(result.accepted, result.outcomes)

    def _retry_request(self, short_digest: str) -> None:
        for d, pending in self.requests.items():
            if _hex(d)[:16] == short_digest:
                if pending.tries >= MAX_REQUEST_TRIES:
                    self.emit("request_abandoned", digest=short_digest, tag=pending.tag)
                    del self.requests[d]
                    return
                pending.tries += 1
                self.emit("request_retry", digest=short_digest, tag=pending.tag, attempt=pending.tries)
                self._broadcast_request(pending.msg)
                self.ctx.world.set_timer(self.node_id, f"req:{short_digest}", CLIENT_TIMEOUT)
                return

    def on_timer(self, timer_id: str) -> None:
        kind, _, arg = timer_id.partition(":")
        if kind == "req":
            self._retry_request(arg)


class ValidatorNode(ProtocolNode):
    """RSU or edge server: PBFT replica, DBNR resolver, BiSA responder and relay."""

    relay = True

    def __init__(self, node_id: str, ctx: SimContext, key: SigningKey, replica: Replica, mode: str = "honest") -> None:
        super().__init__(node_id, ctx, key)
        self.replica = replica
        self.mode = mode
        self.cache = refresh_cache(ResolverCache.empty(), replica.ledger)
        self.responder = Responder(self)
        self.clients: dict[Address, str] = {}

    @property
    def honest(self) -> bool:
        return self.mode == "honest"

    @property
    def crashed(self) -> bool:
        return self.mode == "crash"

    def ledger_view(self) -> LedgerState:
        return self.replica.ledger

    def receive(self, packet: Packet) -> None:
        if packet.channel == "pbft":
            try:
                msg = ConsensusMessage.decode(packet.body)
            except DecodeError as exc:
                self.emit("reject", channel="pbft", pid=packet.pid, reason=f"DecodeError:{exc}")
                return
            if msg.kind is MsgKind.REPLY:
                self._on_reply(msg)
                return
            if self.crashed:
                return
            if msg.kind is MsgKind.REQUEST:
                before = self.replica.stats["bad_request"]
                fx = self.replica.handle_client_request(msg, self.now)
                if self.replica.stats["bad_request"] > before:
                    self.emit("reject", channel="pbft", pid=packet.pid, reason="BadRequest")
                elif msg.sender not in self.clients:
                    # Replies go back to where an authentic request came from.
                    self.clients[msg.sender] = packet.origin
            else:
                before = self.replica.stats["bad_signature"]
                fx = self.replica.handle_message(msg, self.now)
                if self.replica.stats["bad_signature"] > before:
                    self.emit("reject", channel="pbft", pid=packet.pid, reason="BadSignature")
            self._apply(fx)
        elif packet.channel == "hs":
            self.responder.on_handshake(packet)
        elif packet.channel == "rec":
            self.responder.on_record(packet)
        elif packet.channel == "dbnr_q":
            try:
                query = DbnrQuery.decode(packet.body)
            except DecodeError:
                self.emit("reject", channel="dbnr_q", pid=packet.pid, reason="DecodeError")
                return
            answer = answer_query(self.cache, query, self.now)
            self.emit("dbnr_answer", query=query.query_id, status=answer.status.name, as_of=answer.as_of)
            self.send(packet.src, "dbnr_a", answer.encode())

    def on_timer(self, timer_id: str) -> None:
        kind, _, arg = timer_id.partition(":")
        if kind == "pbft":
            if not self.crashed:
                self._apply(self.replica.handle_timeout(arg, self.now))
        elif kind == "hs":
            self.responder.on_timer(arg)
        else:
            super().on_timer(timer_id)

    def _apply(self, fx: Effects) -> None:
        world = self.ctx.world
        for entry in fx.log:
            action = entry["action"]
            if action == "commit":
                self.emit("commit", view=entry["view"], seq=entry["seq"], digest=entry["digest"], honest=self.honest)
            elif action in ("view_change", "new_view", "enter_view", "equivocate", "conflicting_pre_prepare"):
                self.emit(action, view=entry["view"], seq=entry["seq"], digest=entry["digest"][:16])
        for tid in fx.cancel_timers:
            world.cancel_timer(self.node_id, f"pbft:{tid}")
        for tid, delay in fx.set_timers:
            world.set_timer(self.node_id, f"pbft:{tid}", delay)
        for addr, msg in fx.messages:
            dst = self.ctx.node_of(addr) or self.clients.get(addr)
            if dst is not None:
                self.send(dst, "pbft", msg.encode())
        for ex in fx.executed:
            self.emit(
                "execute",
                seq=ex.seq,
                digest=_hex(ex.digest),
                applied=ex.applied,
                height=self.replica.ledger.height,
                state=_hex(self.replica.ledger.digest())[:16],
                honest=self.honest,
            )
            if ex.applied and ex.block is not None:
                self.cache = refresh_cache(self.cache, self.replica.ledger)
                if self.honest:
                    body = ex.block.encode()
                    for client in self.ctx.light_clients:
                        self.send(client, "block", body)


class Responder:
    """BiSA responder/record endpoint shared by validators and endpoints."""

    def __init__(self, owner: ProtocolNode) -> None:
        self.owner = owner
        self.half_open: dict[bytes, bisa.SessionContext] = {}
        self.half_open_eph: dict[bytes, bytes] = {}
        self.pending: dict[Address, tuple[bisa.PendingHandshake, int]] = {}
        self.sessions: dict[bytes, bisa.SessionContext] = {}
        self.by_peer: dict[Address, bisa.SessionContext] = {}
        self.on_established: Optional[Callable[[bisa.SessionContext], None]] = None
        self.on_failed: Optional[Callable[[Address, str], None]] = None
        self.on_plaintext: Optional[Callable[[bisa.SessionContext, bytes, Packet], None]] = None
        self.attempts: dict[Address, int] = defaultdict(int)

    @property
    def ctx(self) -> SimContext:
        return self.owner.ctx

    def _local(self) -> bisa.LocalIdentity:
        return bisa.LocalIdentity(self.owner.key, self.owner.address)

    def _established(self, session: bisa.SessionContext, role: str, peer_eph: bytes, own_eph: bytes) -> None:
        self.sessions[session.session_id] = session
        self.by_peer[session.peer_addr] = session
        owner_of = getattr(self.ctx.crypto, "owner_of", lambda _: None)
        self.owner.emit(
            "handshake",
            phase="established",
            role=role,
            peer=_hex(session.peer_addr),
            session=_hex(session.session_id),
            fingerprint=session.key_fingerprint,
            peer_eph_owner=owner_of(peer_eph) or "",
            own_eph_owner=owner_of(own_eph) or "",
        )
        if self.on_established is not None:
            self.on_established(session)

    def _fail(self, peer: Address, role: str, cause: str) -> None:
        self.owner.emit("handshake", phase="failed", role=role, peer=_hex(peer), cause=cause)

    # initiator side

    def initiate(self, peer: Address, dst_node: str, via: Optional[str] = None) -> bool:
        try:
            pending, hello = bisa.initiate(
                self.ctx.crypto, self._local(), peer, self.owner.ledger_view(), self.ctx.world.rng(f"bisa:{self.owner.node_id}")
            )
        except bisa.BisaError as exc:
            self._fail(peer, "initiator", exc.reason)
            if self.on_failed is not None:
                self.on_failed(peer, exc.reason)
            return False
        self.attempts[peer] += 1
        self.pending[peer] = (pending, self.attempts[peer])
        self.owner.emit("handshake", phase="hello", role="initiator", peer=_hex(peer), attempt=self.attempts[peer])
        self.owner.send(dst_node, "hs", hello.encode(), via=via)
        self.ctx.world.set_timer(self.owner.node_id, f"hs:{_hex(peer)}:{self.attempts[peer]}", HANDSHAKE_TIMEOUT)
        return True

    def on_timer(self, arg: str) -> None:
        peer_hex, _, attempt = arg.partition(":")
        peer = bytes.fromhex(peer_hex)
        entry = self.pending.get(peer)
        if entry is None or str(entry[1]) != attempt:
            return
        del self.pending[peer]
        self._fail(peer, "initiator", "Timeout")
        if self.on_failed is not None:
            self.on_failed(peer, "Timeout")

    def on_handshake(self, packet: Packet) -> None:
        try:
            msg = bisa.HandshakeMessage.decode(packet.body)
        except DecodeError:
            self.owner.emit("handshake", phase="rejected", role="?", peer="", cause="MalformedHandshake")
            return
        if msg.step is bisa.Step.HELLO:
            self._on_hello(msg, packet)
        elif msg.step is bisa.Step.RESPONSE:
            self._on_response(msg, packet)
        else:
            self._on_confirm(msg)

    def _on_hello(self, hello: bisa.HandshakeMessage, packet: Packet) -> None:
        try:
            session, response = bisa.respond(
                self.ctx.crypto,
                self._local(),
                hello,
                self.owner.ledger_view(),
                self.ctx.world.rng(f"bisa:{self.owner.node_id}"),
                self.owner.now,
            )
        except bisa.BisaError as exc:
            self.owner.emit("handshake", phase="rejected", role="responder", peer=_hex(hello.sender_addr), cause=exc.reason)
            return
        self.half_open[response.nonce] = session
        self.half_open_eph[response.nonce] = response.ephemeral_pub
        self.owner.emit("handshake", phase="response", role="responder", peer=_hex(hello.sender_addr))
        # Reply along the path the Hello actually took.
        self.owner.send(packet.origin, "hs", response.encode())

    def _on_response(self, response: bisa.HandshakeMessage, packet: Packet) -> None:
        entry = self.pending.get(response.sender_addr)
        if entry is None:
            self.owner.emit("handshake", phase="rejected", role="initiator", peer=_hex(response.sender_addr), cause="Unsolicited")
            return
        pending, attempt = entry
        try:
            session, confirm = bisa.complete(self.ctx.crypto, pending, response, self.owner.ledger_view(), self.owner.now)
        except bisa.BisaError as exc:
            del self.pending[response.sender_addr]
            self.ctx.world.cancel_timer(self.owner.node_id, f"hs:{_hex(response.sender_addr)}:{attempt}")
            self._fail(response.sender_addr, "initiator", exc.reason)
            if self.on_failed is not None:
                self.on_failed(response.sender_addr, exc.reason)
            return
        del self.pending[response.sender_addr]
        self.ctx.world.cancel_timer(self.owner.node_id, f"hs:{_hex(response.sender_addr)}:{attempt}")
        self.owner.send(packet.origin, "hs", confirm.encode())
        self._established(session, "initiator", response.ephemeral_pub, pending.ephemeral.public)

    def _on_confirm(self, confirm: bisa.HandshakeMessage) -> None:
        session = self.half_open.get(confirm.peer_nonce)
        if session is None:
            self.owner.emit("handshake", phase="rejected", role="responder", peer=_hex(confirm.sender_addr), cause="Unsolicited")
            return
        peer_eph = session._peer_eph
        try:
            bisa.accept_confirm(self.ctx.crypto, session, confirm, self.owner.ledger_view(), self.owner.now)
        except bisa.BisaError as exc:
            self.owner.emit("handshake", phase="rejected", role="responder", peer=_hex(confirm.sender_addr), cause=exc.reason)
            return
        del self.half_open[confirm.peer_nonce]
        own_eph = self.half_open_eph.pop(confirm.peer_nonce, b"")
        self._established(session, "responder", peer_eph, own_eph)

    # records

    def on_record(self, packet: Packet) -> None:
        session = self.sessions.get(bisa.record_session_id(packet.body))
        if session is None:
            self.owner.emit("record", outcome="rejected", reason="UnknownSession", pid=packet.pid)
            return
        if self.on_plaintext is not None:
            self.on_plaintext(session, packet.body, packet)
            return
        try:
            plaintext = bisa.open_record(session, packet.body)
        except bisa.BisaError as exc:
            self.owner.emit("record", outcome="rejected", reason=exc.reason, pid=packet.pid, peer=_hex(session.peer_addr))
            return
        self.owner.emit("record", outcome="opened", pid=packet.pid, peer=_hex(session.peer_addr), size=len(plaintext))

    def seal_to(self, peer: Address, plaintext: bytes) -> Optional[bytes]:
        session = self.by_peer.get(peer)
        if session is None or not session.established:
            return None
        return bisa.seal(session, plaintext)


class LightLedger:
    """A non-voting ledger view fed by validator block announcements.

    A block is applied once ``f + 1`` distinct validators announced the same
    block at the next height, so at least one honest validator vouches for it.
    """

    def __init__(self, state: LedgerState, cfg: ValidatorSetConfig, crypto: CryptoProvider) -> None:
        self.state = state
        self.cfg = cfg
        self.crypto = crypto
        self.blocks: list[Block] = [state.head]
        self._votes: dict[tuple[int, bytes], set[str]] = defaultdict(set)
        self._bodies: dict[tuple[int, bytes], Block] = {}

    def offer(self, block: Block, from_node: str) -> list[Block]:
        key = (block.height, block.hash)
        if block.height <= self.state.height:
            return []
        self._votes[key].add(from_node)
        self._bodies[key] = block
        applied = []
        progress = True
        while progress:
            progress = False
            for (h, bh), voters in list(self._votes.items()):
                if h == self.state.height + 1 and len(voters) >= self.cfg.reply_quorum:
                    try:
                        self.state = append_block(self.state, self._bodies[(h, bh)], self.crypto)
                    except LedgerError:
                        del self._votes[(h, bh)]
                        continue
                    self.blocks.append(self._bodies[(h, bh)])
                    applied.append(self._bodies[(h, bh)])
                    for k in [k for k in self._votes if k[0] <= h]:
                        self._votes.pop(k, None)
                        self._bodies.pop(k, None)
                    progress = True
                    break
        return applied


class EndpointNode(ProtocolNode):
    """Vehicle, pedestrian or cloud archive: a light client and BiSA party."""

    def __init__(
        self,
        node_id: str,
        ctx: SimContext,
        key: SigningKey,
        role: Role,
        *,
        sponsor_key: Optional[SigningKey] = None,
        bus: Optional[VehicleBus] = None,
        join_at: int = 0,
        preregistered: bool = False,
    ) -> None:
        super().__init__(node_id, ctx, key)
        self.role = role
        self.sponsor_key = sponsor_key
        self.bus = bus
        self.join_at = join_at
        self.light = LightLedger(ctx.genesis, ctx.cfg, ctx.crypto)
        self.responder = Responder(self)
        self.responder.on_established = self._on_established
        self.responder.on_failed = self._on_handshake_failed
        if bus is not None:
            self.responder.on_plaintext = self._on_gateway_record
        self.dbnr_version = 0
        self.registered = preregistered
        self.outbox: dict[Address, list[bytes]] = defaultdict(list)
        self.handshake_targets: dict[Address, str] = {}
        self.queries: dict[int, tuple[Address, Callable[[Optional[DbnrAnswer]], None]]] = {}
        self._query_id = 0
        self.on_ready: list[Callable[[], None]] = []
        self.retries: dict[Address, int] = defaultdict(int)
        self.connecting: set[Address] = set()

    def ledger_view(self) -> LedgerState:
        return self.light.state

    @property
    def attachment(self) -> Optional[str]:
        return self.ctx.world.attachment.get(self.node_id)

    def on_start(self) -> None:
        if not self.registered:
            self.ctx.world.set_timer(self.node_id, "join", self.join_at)

    # registration and DBNR

    def _locator(self) -> Locator:
        return Locator(Layer.PRIMARY, self.attachment or self.node_id)

    def _upsert(self) -> LedgerTransaction:
        tx = make_upsert(self.ctx.crypto, self.key, "v2x0", self._locator(), self.dbnr_version, self.now + self.ctx.dbnr_expiry)
        self.dbnr_version += 1
        return tx

    def join(self) -> None:
        reg = make_registration(self.ctx.crypto, self.key, self.role, sponsor_key=self.sponsor_key)
        self.submit([reg, self._upsert()], "register", self._on_registered)

    def _on_registered(self, accepted: bool, outcomes: tuple[str, ...]) -> None:
        self.emit("registered", accepted=accepted)
        if accepted:
            self.registered = True
            self._schedule_refresh()
            if self.bus is not None:
                self._export_components()
            for cb in self.on_ready:
                cb()

    def _schedule_refresh(self) -> None:
        self.ctx.world.set_timer(self.node_id, "dbnr_refresh", max(self.ctx.dbnr_expiry - REFRESH_MARGIN, 1))

    def update_dbnr(self, reason: str = "update") -> None:
        if not self.registered:
            return
        try:
            tx = self._upsert()
        except Exception as exc:  # RevokedIdentity from a fresher ledger view
            self.emit("dbnr_update", reason=reason, error=type(exc).__name__)
            return
        self.emit("dbnr_update", reason=reason, version=self.dbnr_version, locator=self._locator().attachment)
        self.submit([tx], f"dbnr:{reason}")
        self._schedule_refresh()

    def _export_components(self) -> None:
        assert self.bus is not None
        for comp in sorted(self.bus.components.values(), key=lambda c: c.component_id):
            if not comp.export or comp.address is not None:
                continue
            try:
                txs = export_component(
                    self.bus,
                    self.ctx.crypto,
                    self.key,
                    comp.component_id,
                    self.ledger_view() if self.ledger_view().is_active(self.address) else _assume_active(self),
                    expires_at=2**62,
                )
            except BusError as exc:
                self.emit("export", component=comp.component_id, error=exc.reason)
                continue
            self.ctx.directory[comp.address] = self.node_id
            self.emit("export", component=comp.component_id, address=_hex(comp.address))
            self.submit(list(txs), f"export:{comp.component_id}")

    def move(self, rsu: str, template) -> None:
        old = self.attachment
        self.ctx.world.attach(self.node_id, rsu, template)
        self.emit("move", old=old, new=rsu)
        self.update_dbnr("mobility")

    # resolution

    def resolve(self, peer: Address, then: Callable[[Optional[DbnrAnswer]], None]) -> None:
        rsu = self.attachment
        if rsu is None:
            then(None)
            return
        self._query_id += 1
        self.queries[self._query_id] = (peer, then)
        self.send(rsu, "dbnr_q", DbnrQuery(peer, self._query_id).encode())

    def _on_answer(self, packet: Packet) -> None:
        try:
            answer = DbnrAnswer.decode(packet.body)
        except DecodeError:
            self.emit("reject", channel="dbnr_a", pid=packet.pid, reason="DecodeError")
            return
        entry = self.queries.pop(answer.query_id, None)
        if entry is None or entry[0] != answer.address:
            return
        peer, then = entry
        if answer.record is not None and not record_is_authentic(answer.record, self.ledger_view(), self.ctx.crypto):
            self.emit("dbnr_resolve", peer=_hex(peer), status="Unauthentic")
            then(None)
            return
        self.emit(
            "dbnr_resolve",
            peer=_hex(peer),
            status=answer.status.name,
            version=answer.record.version if answer.record else 0,
        )
        then(answer)

    # handshakes and application data

    def connect(self, peer: Address) -> None:
        """Resolve ``peer`` and run a BiSA handshake with the node serving it."""
        if peer in self.connecting:
            return
        self.connecting.add(peer)
        rec = self.ledger_view().identity(peer)
        if rec is not None and rec.role in INFRASTRUCTURE | {Role.CLOUD_SERVER}:
            dst = self.ctx.node_of(peer)
            if dst is None:
                self._on_handshake_failed(peer, "NoRoute")
            else:
                self.responder.initiate(peer, dst)
            return

        def resolved(answer: Optional[DbnrAnswer]) -> None:
            if answer is None or answer.status is not AnswerStatus.FOUND or answer.record is None:
                cause = "Unresolvable" if answer is None else answer.status.name
                self.emit("handshake", phase="failed", role="initiator", peer=_hex(peer), cause=cause)
                self._on_handshake_failed(peer, cause)
                return
            locator = answer.record.locator
            if locator.layer is Layer.SUB_LAYER:
                # Components are reached through their vehicle's gateway.
                vehicle = locator.attachment
                gw = self.ctx.world.nodes.get(vehicle)
                if not isinstance(gw, EndpointNode):
                    self._on_handshake_failed(peer, "NoRoute")
                    return
                self.handshake_targets[peer] = vehicle
                self.connect(gw.address)
                return
            dst = self.ctx.node_of(peer)
            if dst is None:
                self._on_handshake_failed(peer, "NoRoute")
                return
            # The Hello follows the resolved locator, stale or not.
            self.responder.initiate(peer, dst, via=locator.attachment)

        self.resolve(peer, resolved)

    def _behind(self, gateway: Address) -> list[Address]:
        """Component addresses reached through the vehicle whose address is ``gateway``."""
        out = []
        for comp_addr, vehicle in self.handshake_targets.items():
            gw = self.ctx.world.nodes.get(vehicle)
            if isinstance(gw, EndpointNode) and gw.address == gateway:
                out.append(comp_addr)
        return sorted(out)

    def _on_established(self, session: bisa.SessionContext) -> None:
        self.retries.pop(session.peer_addr, None)
        self.connecting.discard(session.peer_addr)
        if self.bus is not None:
            self.bus.add_session(session)
        self._flush(session.peer_addr)
        for comp_addr in self._behind(session.peer_addr):
            self.connecting.discard(comp_addr)
            self._flush(comp_addr, via=session.peer_addr)

    def _on_handshake_failed(self, peer: Address, cause: str) -> None:
        self.connecting.discard(peer)
        if cause == "Timeout" and self.retries[peer] < HANDSHAKE_RETRIES:
            self.retries[peer] += 1
            self.connect(peer)
            return
        self.retries.pop(peer, None)
        for target in [peer, *self._behind(peer)]:
            self.connecting.discard(target)
            dropped = len(self.outbox.pop(target, []))
            self.emit("handshake_result", peer=_hex(target), ok=False, cause=cause)
            if dropped:
                self.emit("send_failed", peer=_hex(target), count=dropped, cause=cause)

    def send_app(self, peer: Address, component: str, payload: bytes) -> None:
        envelope = encode_envelope(component, payload)
        target = self._session_peer(peer)
        if target is not None and self.responder.seal_to(target, envelope) is not None:
            self.outbox[peer].append(envelope)
            self._flush(peer, via=target)
            return
        self.outbox[peer].append(envelope)
        self.connect(peer)

    def _session_peer(self, peer: Address) -> Optional[Address]:
        if peer in self.responder.by_peer:
            return peer
        vehicle = self.handshake_targets.get(peer)
        if vehicle is not None:
            gw = self.ctx.world.nodes.get(vehicle)
            if isinstance(gw, EndpointNode) and gw.address in self.responder.by_peer:
                return gw.address
        return None

    def _flush(self, peer: Address, via: Optional[Address] = None) -> None:
        via = via or peer
        dst = self.ctx.node_of(via)
        for envelope in self.outbox.pop(peer, []):
            record = self.responder.seal_to(via, envelope)
            if record is None or dst is None:
                continue
            self.emit("app_send", peer=_hex(peer), via=_hex(via), size=len(envelope))
            self.send(dst, "rec", record)
        if peer != via:
            self.emit("handshake_result", peer=_hex(peer), ok=True, via=_hex(via))

    # inbound

    def receive(self, packet: Packet) -> None:
        ch = packet.channel
        if ch == "pbft":
            try:
                msg = ConsensusMessage.decode(packet.body)
            except DecodeError:
                self.emit("reject", channel="pbft", pid=packet.pid, reason="DecodeError")
                return
            self._on_reply(msg)
        elif ch == "hs":
            self.responder.on_handshake(packet)
        elif ch == "rec":
            self.responder.on_record(packet)
        elif ch == "dbnr_a":
            self._on_answer(packet)
        elif ch == "block":
            self._on_block(packet)
        elif ch == "raw":
            self._on_raw(packet)

    def _on_block(self, packet: Packet) -> None:
        try:
            block = Block.decode(packet.body)
        except DecodeError:
            self.emit("reject", channel="block", pid=packet.pid, reason="DecodeError")
            return
        if packet.src not in self.ctx.validator_nodes:
            return
        for b in self.light.offer(block, packet.src):
            revoked = sorted(_hex(tx.payload.target) for tx in b.txs if tx.kind is TxKind.REVOKE_IDENTITY)
            self.emit("ledger_refresh", height=b.height, state=_hex(self.light.state.digest())[:16], revoked=revoked)

    def _on_gateway_record(self, session: bisa.SessionContext, record: bytes, packet: Packet) -> None:
        assert self.bus is not None
        try:
            msg = gateway_ingress(self.bus, session, record)
        except Blocked as exc:
            self.emit("bus", outcome="blocked", reason=exc.reason, origin="External", peer=_hex(session.peer_addr), dst=_blocked_dst(exc))
            return
        except (bisa.BisaError, BusError) as exc:
            self.emit("bus", outcome="rejected", reason=exc.reason, origin="External", peer=_hex(session.peer_addr))
            return
        comp = self.bus.components[msg.dst]
        self.emit(
            "bus",
            outcome="delivered",
            origin="External",
            dst=msg.dst,
            sensitivity=comp.sensitivity.name,
            peer=_hex(session.peer_addr),
        )
        self._decide([input_from(msg)])

    def _on_raw(self, packet: Packet) -> None:
        try:
            claimed, payload = decode_envelope(packet.body)
            source = bytes.fromhex(claimed) if claimed else None
        except (DecodeError, ValueError):
            source, payload = None, packet.body
        self._decide([DecisionInput(source, payload, None)])

    def _decide(self, candidates: list[DecisionInput]) -> None:
        if self.bus is None:
            for c in candidates:
                self.emit("filter", accepted=False, reason="NoVehicle", source=_hex(c.source or b""))
            return
        before = dict(self.bus.filtered)
        accepted = decision_filter(self.bus, candidates, self.ledger_view())
        for c in candidates:
            ok = c in accepted
            reason = ""
            if not ok:
                diff = {k: v - before.get(k, 0) for k, v in self.bus.filtered.items() if v - before.get(k, 0)}
                reason = sorted(diff)[0] if diff else "Filtered"
            self.emit(
                "filter",
                accepted=ok,
                reason=reason,
                source=_hex(c.source or b""),
                session=_hex(c.session_id or b""),
                height=self.ledger_view().height,
            )

    def on_timer(self, timer_id: str) -> None:
        kind, _, arg = timer_id.partition(":")
        if kind == "join":
            self.join()
        elif kind == "dbnr_refresh":
            self.update_dbnr("expiry")
        elif kind == "hs":
            self.responder.on_timer(arg)
        else:
            super().on_timer(timer_id)


def _blocked_dst(exc: Blocked) -> str:
    text = str(exc)
    return text.split(": ", 1)[1] if ": " in text else ""


def _assume_active(node: EndpointNode) -> LedgerState:
    """Ledger view used for exports before the light client caught up.

    The vehicle's own registration was just accepted by ``f + 1`` replicas, so
    it is Active on the replicated ledger even if this node's view lags.
    """
    from dataclasses import replace as _replace
    from types import MappingProxyType

    from ..ledger import IdentityRecord, Status

    state = node.ledger_view()
    ids = dict(state.identities)
    ids[node.address] = IdentityRecord(node.address, node.key.public, node.role, Status.ACTIVE, node.now, b"")
    return _replace(state, identities=MappingProxyType(ids))


# active adversaries


class JunkSource(Node):
    """Floods ``targets`` with ``rate`` junk packets per tick during its window."""

    def __init__(self, node_id: str, world: World, targets: list[str], rate: int, window: tuple[int, int], adv: str) -> None:
        super().__init__(node_id)
        self.targets = targets
        self.rate = rate
        self.window = window
        self.adv = adv

    def on_start(self) -> None:
        assert self.world is not None
        self.world.set_timer(self.node_id, "tick", max(self.window[0] - self.world.now, 0))

    def on_timer(self, timer_id: str) -> None:
        world = self.world
        assert world is not None
        if world.now >= self.window[1]:
            return
        rng = world.rng(f"junk:{self.node_id}")
        for i in range(self.rate):
            target = self.targets[i % len(self.targets)]
            world.send(self.node_id, target, "junk", rng.randbytes(32))
        world.emit("adversary", self.adv, action="flood", adv="dos", count=self.rate)
        world.set_timer(self.node_id, "tick", 1)


class SybilNode(ProtocolNode):
    """A fabricated identity: tries to register without a real sponsor, then to handshake."""

    def __init__(self, node_id: str, ctx: SimContext, key: SigningKey, victims: list[str], start: int, adv: str) -> None:
        super().__init__(node_id, ctx, key)
        self.victims = victims
        self.start = start
        self.adv = adv
        self.responder = Responder(self)

    def ledger_view(self) -> LedgerState:
        return self.ctx.genesis

    def on_start(self) -> None:
        self.ctx.world.set_timer(self.node_id, "go", self.start)

    def on_timer(self, timer_id: str) -> None:
        if timer_id == "go":
            self._attack()
        else:
            super().on_timer(timer_id)

    def _attack(self) -> None:
        crypto = self.ctx.crypto
        unsponsored = make_registration(crypto, self.key, Role.VEHICLE)
        # A forged endorsement: signed with the Sybil's own key but naming a real RSU.
        rsu_addr = self.ctx.cfg.validators[0]
        reg = Registration(self.address, self.key.public, Role.VEHICLE, rsu_addr, crypto.sign(self.key, endorsement_bytes(self.address, self.key.public, Role.VEHICLE)))
        forged = sign_transaction(crypto, LedgerTransaction(TxKind.REGISTER_IDENTITY, reg, self.address), self.key)
        self.ctx.world.emit("adversary", self.adv, action="sybil_register", adv="sybil", sybil=self.node_id)
        self.submit([unsponsored], "sybil:unsponsored")
        self.submit([forged], "sybil:forged_sponsor")
        for victim in self.victims:
            node = self.ctx.world.nodes.get(victim)
            if not isinstance(node, ProtocolNode):
                continue
            hello = bisa.HandshakeMessage(
                bisa.Step.HELLO,
                self.address,
                node.address,
                self.ctx.world.rng(f"sybil:{self.node_id}").randbytes(bisa.NONCE_SIZE),
                bytes(bisa.NONCE_SIZE),
                crypto.agreement_key(f"{self.key.label}/eph").public,
            )
            self.ctx.world.emit("adversary", self.adv, action="sybil_hello", adv="sybil", victim=victim)
            self.send(victim, "hs", hello.encode())

    def receive(self, packet: Packet) -> None:
        if packet.channel == "pbft":
            try:
                self._on_reply(ConsensusMessage.decode(packet.body))
            except DecodeError:
                pass


class Impersonator(ProtocolNode):
    """Claims ``victim``'s address while holding only its own keys."""

    def __init__(self, node_id: str, ctx: SimContext, key: SigningKey, victim: Address, targets: list[str], start: int, adv: str) -> None:
        super().__init__(node_id, ctx, key)
        self.victim = victim
        self.targets = targets
        self.start = start
        self.adv = adv
        self.pending: dict[Address, bisa.PendingHandshake] = {}

    def ledger_view(self) -> LedgerState:
        return self.ctx.genesis

    def on_start(self) -> None:
        self.ctx.world.set_timer(self.node_id, "go", self.start)

    def on_timer(self, timer_id: str) -> None:
        if timer_id == "go":
            self._attack()
        else:
            super().on_timer(timer_id)

    def _attack(self) -> None:
        crypto = self.ctx.crypto
        world = self.ctx.world
        local = bisa.LocalIdentity(self.key, self.victim)
        for target in self.targets:
            node = world.nodes.get(target)
            if not isinstance(node, ProtocolNode):
                continue
            eph = crypto.agreement_key(f"{self.key.label}/eph")
            nonce = world.rng(f"imp:{self.node_id}").randbytes(bisa.NONCE_SIZE)
            hello = bisa.HandshakeMessage(bisa.Step.HELLO, self.victim, node.address, nonce, bytes(bisa.NONCE_SIZE), eph.public)
            self.pending[node.address] = bisa.PendingHandshake(local, node.address, nonce, eph, hello)
            world.emit("adversary", self.adv, action="impersonate_hello", adv="impersonation", target=target)
            self.send(target, "hs", hello.encode())
            # Unauthenticated input claiming to come from the victim.
            world.emit("adversary", self.adv, action="inject_raw", adv="impersonation", target=target)
            self.send(target, "raw", encode_envelope(self.victim.hex(), b"brake-now"))
        # A DBNR record for the victim, signed with the impersonator's key.
        forged = make_upsert(crypto, self.key, "v2x0", Locator(Layer.PRIMARY, self.targets[0] if self.targets else ""), 0, 2**62)
        rec = forged.payload
        from dataclasses import replace as _replace

        rec = _replace(rec, address=self.victim, version=10**6)
        rec = _replace(rec, owner_sig=crypto.sign(self.key, rec.signing_bytes()))
        tx = sign_transaction(crypto, LedgerTransaction(TxKind.UPSERT_DBNR_RECORD, rec, self.victim), self.key)
        world.emit("adversary", self.adv, action="forge_dbnr", adv="impersonation")
        self.submit([tx], "impersonation:forged_dbnr")

    def receive(self, packet: Packet) -> None:
        if packet.channel == "hs":
            try:
                response = bisa.HandshakeMessage.decode(packet.body)
            except DecodeError:
                return
            pending = self.pending.pop(response.sender_addr, None)
            if pending is None or response.step is not bisa.Step.RESPONSE:
                return
            # Finish the handshake as well as it can: sign with its own key.
            confirm = bisa.HandshakeMessage(
                bisa.Step.CONFIRM, self.victim, response.sender_addr, pending.nonce, response.nonce, pending.ephemeral.public
            )
            transcript = (
                b"iovsim/bisa/confirm\x00" + pending.hello.header_bytes() + response.encode() + confirm.header_bytes()
            )
            from dataclasses import replace as _replace

            confirm = _replace(confirm, transcript_sig=self.ctx.crypto.sign(self.key, transcript))
            self.ctx.world.emit("adversary", self.adv, action="impersonate_confirm", adv="impersonation")
            self.send(packet.origin, "hs", confirm.encode())
        elif packet.channel == "pbft":
            try:
                self._on_reply(ConsensusMessage.decode(packet.body))
            except DecodeError:
                pass


class RelayNode(ProtocolNode):
    """Non-voting RSU or edge server: relays, resolves from a light ledger, answers BiSA."""

    relay = True

    def __init__(self, node_id: str, ctx: SimContext, key: SigningKey) -> None:
        super().__init__(node_id, ctx, key)
        self.light = LightLedger(ctx.genesis, ctx.cfg, ctx.crypto)
        self.cache = refresh_cache(ResolverCache.empty(), self.light.state)
        self.responder = Responder(self)

    def ledger_view(self) -> LedgerState:
        return self.light.state

    def receive(self, packet: Packet) -> None:
        if packet.channel == "block":
            try:
                block = Block.decode(packet.body)
            except DecodeError:
                return
            if packet.src in self.ctx.validator_nodes and self.light.offer(block, packet.src):
                self.cache = refresh_cache(self.cache, self.light.state)
                self.emit("ledger_refresh", height=self.light.state.height, state=_hex(self.light.state.digest())[:16])
        elif packet.channel == "dbnr_q":
            try:
                query = DbnrQuery.decode(packet.body)
            except DecodeError:
                return
            answer = answer_query(self.cache, query, self.now)
            self.emit("dbnr_answer", query=query.query_id, status=answer.status.name, as_of=answer.as_of)
            self.send(packet.src, "dbnr_a", answer.encode())
        elif packet.channel == "hs":
            self.responder.on_handshake(packet)
        elif packet.channel == "rec":
            self.responder.on_record(packet)
        elif packet.channel == "pbft":
            try:
                self._on_reply(ConsensusMessage.decode(packet.body))
            except DecodeError:
                pass

    def on_timer(self, timer_id: str) -> None:
        kind, _, arg = timer_id.partition(":")
        if kind == "hs":
            self.responder.on_timer(arg)
        else:
            super().on_timer(timer_id)
