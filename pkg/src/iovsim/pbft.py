"""PBFT replication of the identity ledger.

Standard three-phase PBFT (pre-prepare / prepare / commit) with view change
and checkpoints, plus one modification: the primary keeps at most one new
batch in flight and aggregates every pending client request into it.  A
batch is proposed as a fully built, primary-signed :class:`Block`, so
replicas apply exactly the bytes they agreed on.

A :class:`Replica` is a deterministic state machine.  Every handler returns an
:class:`Effects` value listing outbound messages, timer requests, executed
batches and decision-log lines; the caller (simulator or test harness) owns
delivery and time.

ConsensusMessage layout::

    u8 kind | u64 view | u64 seq | bytes digest(32) | bytes sender(20)
    | bytes signature | optional<bytes payload>

The signature covers everything but itself and the payload; the payload is
bound through ``digest = sha256(payload)``.
"""

from __future__ import annotations

import logging
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable, Iterable, Optional, Sequence, Union

from .crypto import CryptoProvider, SigningKey
from .encoding import DecodeError, Reader, Writer, decode_all
from .ledger import (
    ADDRESS_SIZE,
    HASH_SIZE,
    Address,
    Block,
    LedgerError,
    LedgerState,
    LedgerTransaction,
    Status,
    TxKind,
    append_block,
    apply_all,
    derive_address,
    digest,
    short,
)

log = logging.getLogger(__name__)

DEFAULT_VIEW_TIMEOUT = 50
DEFAULT_CHECKPOINT_INTERVAL = 16
BUFFER_WINDOW = 64
MAX_BATCH = 64


def quorum_sizes(n: int) -> tuple[int, int, int, int]:
    """``(f, prepare_quorum, commit_quorum, reply_quorum)`` for ``n`` validators."""
    if n < 1:
        raise ValueError("need at least one validator")
    f = (n - 1) // 3
    return f, 2 * f, 2 * f + 1, f + 1


@dataclass(frozen=True)
class ValidatorSetConfig:
    validators: tuple[Address, ...]
    view_timeout: int = DEFAULT_VIEW_TIMEOUT
    checkpoint_interval: int = DEFAULT_CHECKPOINT_INTERVAL
    buffer_window: int = BUFFER_WINDOW
    max_batch: int = MAX_BATCH

    def __post_init__(self) -> None:
        if not self.validators:
            raise ValueError("need at least one validator")
        if len(set(self.validators)) != len(self.validators):
            raise ValueError("duplicate validator")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be positive")

    @property
    def n(self) -> int:
        return len(self.validators)

    @property
    def f(self) -> int:
        return quorum_sizes(self.n)[0]

    @property
    def prepare_quorum(self) -> int:
        return quorum_sizes(self.n)[1]

    @property
    def commit_quorum(self) -> int:
        return quorum_sizes(self.n)[2]

    @property
    def reply_quorum(self) -> int:
        return quorum_sizes(self.n)[3]

    def primary(self, view: int) -> Address:
        return self.validators[view % self.n]

    @property
    def log_window(self) -> int:
        return 4 * self.checkpoint_interval


# messages


class MsgKind(IntEnum):
    REQUEST = 1
    PRE_PREPARE = 2
    PREPARE = 3
    COMMIT = 4
    REPLY = 5
    VIEW_CHANGE = 6
    NEW_VIEW = 7
    CHECKPOINT = 8


@dataclass(frozen=True)
class ClientRequest:
    client: Address
    timestamp: int
    txs: tuple[LedgerTransaction, ...]

    def write(self, w: Writer) -> None:
        w.bytes(self.client).u64(self.timestamp).seq(self.txs, lambda w_, tx: tx.write(w_))

    @classmethod
    def read(cls, r: Reader) -> "ClientRequest":
        return cls(r.bytes(ADDRESS_SIZE), r.u64(), tuple(r.seq(LedgerTransaction.read)))


@dataclass(frozen=True)
class Proposal:
    """A batch: the client requests plus the block built from their transactions."""

    requests: tuple["ConsensusMessage", ...]
    block: Optional[Block]

    def write(self, w: Writer) -> None:
        w.seq(self.requests, lambda w_, m: w_.bytes(m.encode()))
        w.optional(self.block, lambda w_, b: b.write(w_))

    @classmethod
    def read(cls, r: Reader) -> "Proposal":
        requests = tuple(r.seq(lambda r_: ConsensusMessage.decode(r_.bytes())))
        return cls(requests, r.optional(Block.read))

    @property
    def is_null(self) -> bool:
        return self.block is None and not self.requests


NULL_PROPOSAL = Proposal((), None)


@dataclass(frozen=True)
class ReplyBody:
    request: bytes
    outcomes: tuple[str, ...]

    def write(self, w: Writer) -> None:
        w.bytes(self.request).seq(self.outcomes, Writer.str)

    @classmethod
    def read(cls, r: Reader) -> "ReplyBody":
        return cls(r.bytes(HASH_SIZE), tuple(r.seq(Reader.str)))

    @property
    def accepted(self) -> bool:
        return all(o == "accepted" for o in self.outcomes)


@dataclass(frozen=True)
class PreparedCert:
    pre_prepare: "ConsensusMessage"
    prepares: tuple["ConsensusMessage", ...]

    def write(self, w: Writer) -> None:
        w.bytes(self.pre_prepare.encode()).seq(self.prepares, lambda w_, m: w_.bytes(m.encode()))

    @classmethod
    def read(cls, r: Reader) -> "PreparedCert":
        pp = ConsensusMessage.decode(r.bytes())
        return cls(pp, tuple(r.seq(lambda r_: ConsensusMessage.decode(r_.bytes()))))


@dataclass(frozen=True)
class ViewChangeBody:
    checkpoint_proof: tuple["ConsensusMessage", ...]
    prepared: tuple[PreparedCert, ...]

    def write(self, w: Writer) -> None:
        w.seq(self.checkpoint_proof, lambda w_, m: w_.bytes(m.encode()))
        w.seq(self.prepared, lambda w_, c: c.write(w_))

    @classmethod
    def read(cls, r: Reader) -> "ViewChangeBody":
        proof = tuple(r.seq(lambda r_: ConsensusMessage.decode(r_.bytes())))
        return cls(proof, tuple(r.seq(PreparedCert.read)))


@dataclass(frozen=True)
class NewViewBody:
    view_changes: tuple["ConsensusMessage", ...]
    pre_prepares: tuple["ConsensusMessage", ...]

    def write(self, w: Writer) -> None:
        w.seq(self.view_changes, lambda w_, m: w_.bytes(m.encode()))
        w.seq(self.pre_prepares, lambda w_, m: w_.bytes(m.encode()))

    @classmethod
    def read(cls, r: Reader) -> "NewViewBody":
        vcs = tuple(r.seq(lambda r_: ConsensusMessage.decode(r_.bytes())))
        return cls(vcs, tuple(r.seq(lambda r_: ConsensusMessage.decode(r_.bytes()))))


Body = Union[ClientRequest, Proposal, ReplyBody, ViewChangeBody, NewViewBody]
_BODY_TYPES = {
    MsgKind.REQUEST: ClientRequest,
    MsgKind.PRE_PREPARE: Proposal,
    MsgKind.REPLY: ReplyBody,
    MsgKind.VIEW_CHANGE: ViewChangeBody,
    MsgKind.NEW_VIEW: NewViewBody,
}


def body_bytes(body: Body) -> bytes:
    w = Writer()
    body.write(w)
    return w.getvalue()


NULL_DIGEST = digest(body_bytes(NULL_PROPOSAL))


@dataclass(frozen=True)
class ConsensusMessage:
    kind: MsgKind
    view: int
    seq: int
    digest: bytes
    sender: Address
    signature: bytes = b""
    payload: Optional[Body] = None

    def signing_bytes(self) -> bytes:
        w = Writer().u8(self.kind).u64(self.view).u64(self.seq).bytes(self.digest).bytes(self.sender)
        return b"iovsim/pbft\x00" + w.getvalue()

    def encode(self) -> bytes:
        w = Writer().u8(self.kind).u64(self.view).u64(self.seq).bytes(self.digest).bytes(self.sender)
        w.bytes(self.signature)
        w.optional(self.payload, lambda w_, p: w_.bytes(body_bytes(p)))
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "ConsensusMessage":
        kind = r.enum(MsgKind)
        view, seq = r.u64(), r.u64()
        dig, sender, sig = r.bytes(HASH_SIZE), r.bytes(ADDRESS_SIZE), r.bytes()
        body_type = _BODY_TYPES.get(kind)
        raw = r.optional(Reader.bytes)
        payload = None
        if raw is not None:
            if body_type is None:
                raise DecodeError(f"{kind.name} carries no payload")
            payload = decode_all(raw, body_type.read)
        return cls(kind, view, seq, dig, sender, sig, payload)

    @classmethod
    def decode(cls, data: bytes) -> "ConsensusMessage":
        return decode_all(data, cls.read)

    def payload_matches(self) -> bool:
        return self.payload is None or digest(body_bytes(self.payload)) == self.digest

    def summary(self) -> str:
        return f"{self.kind.name}(v={self.view},n={self.seq},d={self.digest.hex()[:8]},from={short(self.sender)})"


def sign_message(crypto: CryptoProvider, key: SigningKey, msg: ConsensusMessage) -> ConsensusMessage:
    return replace(msg, signature=crypto.sign(key, msg.signing_bytes()))


def make_message(
    crypto: CryptoProvider,
    key: SigningKey,
    kind: MsgKind,
    view: int,
    seq: int,
    *,
    payload: Optional[Body] = None,
    dig: Optional[bytes] = None,
) -> ConsensusMessage:
    if dig is None:
        assert payload is not None
        dig = digest(body_bytes(payload))
    sender = derive_address(crypto, key.public)
    return sign_message(crypto, key, ConsensusMessage(kind, view, seq, dig, sender, b"", payload))


def make_request(
    crypto: CryptoProvider, key: SigningKey, timestamp: int, txs: Sequence[LedgerTransaction]
) -> ConsensusMessage:
    body = ClientRequest(derive_address(crypto, key.public), timestamp, tuple(txs))
    return make_message(crypto, key, MsgKind.REQUEST, 0, 0, payload=body)


def request_key(req: ConsensusMessage, state: LedgerState) -> Optional[bytes]:
    """Verify key for a client request: the client's ledger key, or the key it registers."""
    body = req.payload
    if not isinstance(body, ClientRequest) or req.sender != body.client:
        return None
    rec = state.identity(body.client)
    if rec is not None:
        return rec.verify_key if rec.status is Status.ACTIVE else None
    if body.txs:
        first = body.txs[0]
        if first.kind is TxKind.REGISTER_IDENTITY and first.payload.address == body.client:
            return first.payload.verify_key
    return None


def request_is_authentic(req: ConsensusMessage, state: LedgerState, crypto: CryptoProvider) -> bool:
    if req.kind is not MsgKind.REQUEST or not req.payload_matches() or req.payload is None:
        return False
    key = request_key(req, state)
    return key is not None and crypto.verify(key, req.signing_bytes(), req.signature)


def admission_outcomes(
    state: LedgerState, txs: Sequence[LedgerTransaction], crypto: CryptoProvider, *, now: int, open_registration: bool
) -> tuple[Optional[LedgerState], tuple[str, ...]]:
    """Apply ``txs`` in order; return the new state (or None) and per-transaction outcomes."""
    outcomes: list[str] = []
    for i, tx in enumerate(txs):
        try:
            state = apply_all(state, [tx], crypto, logical_time=now, open_registration=open_registration)
            outcomes.append("accepted")
        except LedgerError as exc:
            outcomes.append(f"rejected:{exc.reason}")
            outcomes.extend("aborted" for _ in txs[i + 1 :])
            return None, tuple(outcomes)
    return state, tuple(outcomes)


def client_collect_replies(replies: Iterable[ConsensusMessage], cfg: ValidatorSetConfig) -> Optional[ReplyBody]:
    """Accept a result once ``f + 1`` distinct validators reported the same reply digest."""
    validators = set(cfg.validators)
    votes: dict[bytes, set[Address]] = defaultdict(set)
    bodies: dict[bytes, ReplyBody] = {}
    for msg in replies:
        if msg.kind is not MsgKind.REPLY or msg.sender not in validators or not isinstance(msg.payload, ReplyBody):
            continue
        if not msg.payload_matches():
            continue
        votes[msg.digest].add(msg.sender)
        bodies[msg.digest] = msg.payload
        if len(votes[msg.digest]) >= cfg.reply_quorum:
            return msg.payload
    return None


# replica


@dataclass
class Slot:
    pre_prepare: Optional[ConsensusMessage] = None
    # Votes are keyed by (sender, digest): a faulty sender's conflicting votes
    # must not shadow the one that matches a certificate.
    prepares: dict[tuple[Address, bytes], ConsensusMessage] = field(default_factory=dict)
    commits: dict[tuple[Address, bytes], ConsensusMessage] = field(default_factory=dict)
    prepared: bool = False
    sent_commit: bool = False


@dataclass
class Executed:
    seq: int
    digest: bytes
    block: Optional[Block]
    applied: bool
    replies: list[ReplyBody]


@dataclass
class Effects:
    messages: list[tuple[Address, ConsensusMessage]] = field(default_factory=list)
    set_timers: list[tuple[str, int]] = field(default_factory=list)
    cancel_timers: list[str] = field(default_factory=list)
    executed: list[Executed] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    def extend(self, other: "Effects") -> None:
        self.messages.extend(other.messages)
        self.set_timers.extend(other.set_timers)
        self.cancel_timers.extend(other.cancel_timers)
        self.executed.extend(other.executed)
        self.log.extend(other.log)


class NotValidator(Exception):
    pass


class Replica:
    """One validator's PBFT state plus its executed copy of the ledger."""

    def __init__(
        self,
        cfg: ValidatorSetConfig,
        key: SigningKey,
        crypto: CryptoProvider,
        genesis: LedgerState,
        *,
        open_registration: bool = False,
    ) -> None:
        self.cfg = cfg
        self.key = key
        self.crypto = crypto
        self.address = derive_address(crypto, key.public)
        if self.address not in cfg.validators:
            raise NotValidator(short(self.address))
        self.open_registration = open_registration
        self.validator_keys = {}
        for addr in cfg.validators:
            rec = genesis.identity(addr)
            if rec is None:
                raise NotValidator(f"validator {short(addr)} missing from genesis")
            self.validator_keys[addr] = rec.verify_key

        self.ledger = genesis
        self.blocks: list[Block] = [genesis.head]
        self.view = 0
        self.view_active = True
        self.pending_view = 0
        self.next_seq = 1
        self.last_executed = 0
        self.stable_checkpoint = 0
        self.stable_proof: tuple[ConsensusMessage, ...] = ()
        self.log: dict[tuple[int, int], Slot] = {}
        self.payloads: dict[bytes, Proposal] = {}
        self.pre_prepare_by_digest: dict[bytes, ConsensusMessage] = {}
        self.committed: dict[int, bytes] = {}
        self.pending: OrderedDict[bytes, ConsensusMessage] = OrderedDict()
        self.proposed: set[bytes] = set()
        self.replies: dict[bytes, ConsensusMessage] = {}
        self.checkpoint_votes: dict[tuple[int, bytes], dict[Address, ConsensusMessage]] = defaultdict(dict)
        self.view_changes: dict[int, dict[Address, ConsensusMessage]] = defaultdict(dict)
        self.new_view_sent: set[int] = set()
        self.timers: set[str] = set()
        self.buffer: deque[ConsensusMessage] = deque()
        self.decision_log: list[dict] = []
        self.stats: dict[str, int] = defaultdict(int)

    # helpers

    @property
    def is_primary(self) -> bool:
        return self.cfg.primary(self.view) == self.address

    def _sign(self, msg: ConsensusMessage) -> ConsensusMessage:
        return sign_message(self.crypto, self.key, msg)

    def _message(self, kind: MsgKind, view: int, seq: int, *, payload=None, dig=None) -> ConsensusMessage:
        if dig is None:
            dig = digest(body_bytes(payload))
        return self._sign(ConsensusMessage(kind, view, seq, dig, self.address, b"", payload))

    def _broadcast(self, fx: Effects, msg: ConsensusMessage) -> None:
        for addr in self.cfg.validators:
            if addr != self.address:
                fx.messages.append((addr, msg))

    def _decide(self, fx: Effects, action: str, view: int, seq: int, dig: bytes = b"") -> None:
        entry = {"view": view, "seq": seq, "digest": dig.hex(), "action": action}
        self.decision_log.append(entry)
        fx.log.append(entry)

    def _validator_sig_ok(self, msg: ConsensusMessage) -> bool:
        key = self.validator_keys.get(msg.sender)
        return key is not None and self.crypto.verify(key, msg.signing_bytes(), msg.signature)

    def _set_timer(self, fx: Effects, timer_id: str, delay: int) -> None:
        self.timers.add(timer_id)
        fx.set_timers.append((timer_id, delay))

    def _cancel_timer(self, fx: Effects, timer_id: str) -> None:
        if timer_id in self.timers:
            self.timers.discard(timer_id)
            fx.cancel_timers.append(timer_id)

    @staticmethod
    def _req_timer(d: bytes) -> str:
        return f"req:{d.hex()[:16]}"

    # entry points

    def handle_client_request(self, req: ConsensusMessage, now: int = 0) -> Effects:
        fx = Effects()
        if req.kind is not MsgKind.REQUEST or not request_is_authentic(req, self.ledger, self.crypto):
            self.stats["bad_request"] += 1
            return fx
        d = req.digest
        cached = self.replies.get(d)
        if cached is not None:
            fx.messages.append((req.payload.client, cached))
            self._decide(fx, "reply_cached", cached.view, cached.seq, d)
            return fx
        if d in self.pending:
            if self.is_primary:
                self._try_propose(fx, now)
            return fx
        base = self.ledger
        if self.is_primary and self.view_active and self.next_seq - 1 > self.last_executed:
            # Validation against the in-flight batch happens when it is proposed.
            base = None
        if base is not None:
            _, outcomes = admission_outcomes(
                base, req.payload.txs, self.crypto, now=now, open_registration=self.open_registration
            )
            if any(o != "accepted" for o in outcomes):
                self._reply(fx, req, outcomes, seq=0)
                self._decide(fx, "reject_request", self.view, 0, d)
                return fx
        self.pending[d] = req
        if self.is_primary and self.view_active:
            self._try_propose(fx, now)
        else:
            primary = self.cfg.primary(self.view)
            if req.sender != primary and self.view_active:
                fx.messages.append((primary, req))
            if self.view_active:
                self._set_timer(fx, self._req_timer(d), self.cfg.view_timeout)
            elif f"vc:{self.pending_view}" not in self.timers:
                self._set_timer(fx, f"vc:{self.pending_view}", self.cfg.view_timeout)
        return fx

    def handle_message(self, msg: ConsensusMessage, now: int = 0) -> Effects:
        if msg.kind is MsgKind.REQUEST:
            return self.handle_client_request(msg, now)
        fx = Effects()
        if msg.sender not in self.validator_keys or not msg.payload_matches() or not self._validator_sig_ok(msg):
            self.stats["bad_signature"] += 1
            return fx
        handler = {
            MsgKind.PRE_PREPARE: self._on_pre_prepare,
            MsgKind.PREPARE: self._on_prepare,
            MsgKind.COMMIT: self._on_commit,
            MsgKind.CHECKPOINT: self._on_checkpoint,
            MsgKind.VIEW_CHANGE: self._on_view_change,
            MsgKind.NEW_VIEW: self._on_new_view,
        }.get(msg.kind)
        if handler is not None:
            handler(fx, msg, now)
        return fx

    def handle_timeout(self, timer_id: str, now: int = 0) -> Effects:
        fx = Effects()
        if timer_id not in self.timers:
            return fx
        self.timers.discard(timer_id)
        kind, _, arg = timer_id.partition(":")
        if kind == "req":
            if not self.view_active:
                return fx
            stale = [d for d, req in self.pending.items() if self._req_timer(d) == timer_id]
            for d in stale:
                req = self.pending[d]
                _, outcomes = admission_outcomes(
                    self.ledger, req.payload.txs, self.crypto, now=now, open_registration=self.open_registration
                )
                if any(o != "accepted" for o in outcomes):
                    del self.pending[d]
                    self._reply(fx, req, outcomes, seq=0)
                    continue
                self._decide(fx, "timeout", self.view, 0, d)
                self._start_view_change(fx, self.view + 1, now)
                return fx
        elif kind == "vc":
            target = int(arg)
            # Escalate only while work is outstanding; otherwise wait for the
            # others to reach this view instead of running away from them.
            if not self.view_active and self.pending_view == target and self.pending:
                self._start_view_change(fx, target + 1, now)
        return fx

    # normal case

    def _try_propose(self, fx: Effects, now: int) -> None:
        if not (self.is_primary and self.view_active):
            return
        if self.next_seq - 1 > self.last_executed:
            return
        if self.next_seq > self.stable_checkpoint + self.cfg.log_window:
            return
        state = self.ledger
        batch: list[ConsensusMessage] = []
        for d, req in list(self.pending.items()):
            if d in self.proposed:
                continue
            if d in self.replies:
                del self.pending[d]
                continue
            new_state, outcomes = admission_outcomes(
                state, req.payload.txs, self.crypto, now=now, open_registration=self.open_registration
            )
            if new_state is None:
                del self.pending[d]
                self._reply(fx, req, outcomes, seq=0)
                self._decide(fx, "reject_request", self.view, 0, d)
                continue
            state = new_state
            batch.append(req)
            if len(batch) >= self.cfg.max_batch:
                break
        if not batch:
            return
        proposal = self._build_proposal(batch, now)
        self._propose(fx, proposal, now)

    def _build_proposal(self, batch: Sequence[ConsensusMessage], now: int) -> Proposal:
        txs = tuple(tx for req in batch for tx in req.payload.txs)
        block = Block(
            self.ledger.height + 1,
            self.ledger.head_hash,
            txs,
            self.address,
            b"",
            max(now, self.ledger.head.logical_time),
        )
        block = replace(block, proposer_sig=self.crypto.sign(self.key, block.signing_bytes()))
        return Proposal(tuple(batch), block)

    def _propose(self, fx: Effects, proposal: Proposal, now: int) -> None:
        seq = self.next_seq
        self.next_seq += 1
        msg = self._message(MsgKind.PRE_PREPARE, self.view, seq, payload=proposal)
        for req in proposal.requests:
            self.proposed.add(req.digest)
        self._decide(fx, "pre_prepare", self.view, seq, msg.digest)
        self._broadcast(fx, msg)
        self._accept_pre_prepare(fx, msg, now)

    def _proposal_well_formed(self, proposal: Proposal, sender: Address) -> bool:
        if proposal.block is None:
            return not proposal.requests
        if not proposal.requests or proposal.block.proposer != sender:
            return False
        for req in proposal.requests:
            if req.kind is not MsgKind.REQUEST or not req.payload_matches() or not isinstance(req.payload, ClientRequest):
                return False
        txs = tuple(tx for req in proposal.requests for tx in req.payload.txs)
        return txs == proposal.block.txs

    def _store_payload(self, msg: ConsensusMessage) -> None:
        if isinstance(msg.payload, Proposal) and msg.digest not in self.payloads:
            self.payloads[msg.digest] = msg.payload
            self.pre_prepare_by_digest[msg.digest] = msg

    def _on_pre_prepare(self, fx: Effects, msg: ConsensusMessage, now: int) -> None:
        if msg.sender != self.cfg.primary(msg.view) or not isinstance(msg.payload, Proposal):
            self.stats["bad_pre_prepare"] += 1
            return
        if not self._proposal_well_formed(msg.payload, msg.sender):
            self._decide(fx, "malformed_pre_prepare", msg.view, msg.seq, msg.digest)
            return
        # The digest is self-authenticating; keep the payload from any view so
        # a replica that lost the race can still execute a certified batch.
        self._store_payload(msg)
        if msg.view > self.view:
            self._buffer(fx, msg)
            self._check_committed_digest(fx, msg.digest, now)
            return
        if msg.view < self.view or not self.view_active:
            self._check_committed_digest(fx, msg.digest, now)
            return
        self._accept_pre_prepare(fx, msg, now)

    def _accept_pre_prepare(self, fx: Effects, msg: ConsensusMessage, now: int) -> None:
        v, n = msg.view, msg.seq
        if not (self.stable_checkpoint < n <= self.stable_checkpoint + self.cfg.log_window):
            self._decide(fx, "out_of_window", v, n, msg.digest)
            return
        slot = self.log.setdefault((v, n), Slot())
        if slot.pre_prepare is not None:
            if slot.pre_prepare.digest != msg.digest:
                self.stats["conflicting_pre_prepare"] += 1
                self._decide(fx, "conflicting_pre_prepare", v, n, msg.digest)
                # The first proposal stays in the slot, but the payload may be
                # the one a commit certificate is waiting for.
                self._store_payload(msg)
                self._check_committed(fx, v, n, now)
            return
        self._store_payload(msg)
        slot.pre_prepare = msg
        self._decide(fx, "accept_pre_prepare", v, n, msg.digest)
        if msg.sender != self.address:
            prepare = self._message(MsgKind.PREPARE, v, n, dig=msg.digest)
            slot.prepares[(self.address, prepare.digest)] = prepare
            self._broadcast(fx, prepare)
        self._check_prepared(fx, v, n, now)
        self._check_committed(fx, v, n, now)

    def _on_prepare(self, fx: Effects, msg: ConsensusMessage, now: int) -> None:
        if msg.sender == self.cfg.primary(msg.view):
            return
        if msg.view > self.view:
            self._buffer(fx, msg)
            return
        if msg.view < self.view or not self.view_active or msg.seq <= self.stable_checkpoint:
            return
        slot = self.log.setdefault((msg.view, msg.seq), Slot())
        slot.prepares.setdefault((msg.sender, msg.digest), msg)
        self._check_prepared(fx, msg.view, msg.seq, now)

    def _prepare_count(self, slot: Slot, view: int) -> int:
        if slot.pre_prepare is None:
            return 0
        d = slot.pre_prepare.digest
        primary = self.cfg.primary(view)
        return sum(1 for (s, dd) in slot.prepares if dd == d and s != primary)

    def _check_prepared(self, fx: Effects, v: int, n: int, now: int) -> None:
        slot = self.log.get((v, n))
        if slot is None or slot.pre_prepare is None or slot.prepared:
            return
        if self._prepare_count(slot, v) < self.cfg.prepare_quorum:
            return
        slot.prepared = True
        self._decide(fx, "prepared", v, n, slot.pre_prepare.digest)
        if not slot.sent_commit and v == self.view and self.view_active:
            slot.sent_commit = True
            commit = self._message(MsgKind.COMMIT, v, n, dig=slot.pre_prepare.digest)
            slot.commits[(self.address, commit.digest)] = commit
            self._broadcast(fx, commit)
        self._check_committed(fx, v, n, now)

    def _on_commit(self, fx: Effects, msg: ConsensusMessage, now: int) -> None:
        # 2f+1 matching commits certify (seq, digest) whatever view they come
        # from, so commits are counted immediately rather than buffered.
        if msg.seq > self.stable_checkpoint + self.cfg.log_window:
            return
        if msg.seq <= self.stable_checkpoint or msg.seq in self.committed:
            return
        slot = self.log.setdefault((msg.view, msg.seq), Slot())
        slot.commits.setdefault((msg.sender, msg.digest), msg)
        self._check_committed(fx, msg.view, msg.seq, now)

    def _check_committed_digest(self, fx: Effects, d: bytes, now: int) -> None:
        for (v, n), slot in list(self.log.items()):
            if any(m.digest == d for m in slot.commits.values()):
                self._check_committed(fx, v, n, now)

    def _check_committed(self, fx: Effects, v: int, n: int, now: int) -> None:
        slot = self.log.get((v, n))
        if slot is None or n in self.committed:
            return
        votes: dict[bytes, list[Address]] = defaultdict(list)
        for sender, dd in slot.commits:
            votes[dd].append(sender)
        for d, senders in votes.items():
            if len(senders) < self.cfg.commit_quorum:
                continue
            local = slot.prepared and slot.pre_prepare is not None and slot.pre_prepare.digest == d
            if not local and d not in self.payloads:
                continue
            self.committed[n] = d
            self._decide(fx, "commit", v, n, d)
            # Hand the certified batch and its commit certificate to replicas
            # that did not vote for it, so they can commit without state transfer.
            pp = self.pre_prepare_by_digest.get(d)
            cert = [slot.commits[(s, d)] for s in sorted(senders)][: self.cfg.commit_quorum]
            for addr in self.cfg.validators:
                if addr != self.address and addr not in senders:
                    if pp is not None:
                        fx.messages.append((addr, pp))
                    fx.messages.extend((addr, m) for m in cert)
            self._execute(fx, now)
            return

    def _execute(self, fx: Effects, now: int) -> None:
        while self.last_executed + 1 in self.committed:
            n = self.last_executed + 1
            d = self.committed[n]
            proposal = self.payloads.get(d)
            if proposal is None:
                return
            applied = False
            reason = ""
            if proposal.block is not None:
                if all(request_is_authentic(r, self.ledger, self.crypto) for r in proposal.requests):
                    try:
                        self.ledger = append_block(
                            self.ledger, proposal.block, self.crypto, open_registration=self.open_registration
                        )
                        self.blocks.append(proposal.block)
                        applied = True
                    except LedgerError as exc:
                        reason = exc.reason
                else:
                    reason = "BadRequestSignature"
            self.last_executed = n
            self._decide(fx, "execute" if applied else "execute_null" if proposal.is_null else "execute_rejected", self.view, n, d)
            bodies = []
            for req in proposal.requests:
                if applied:
                    outcomes = tuple("accepted" for _ in req.payload.txs)
                else:
                    outcomes = tuple(f"rejected:{reason}" for _ in req.payload.txs)
                if applied or req.digest in self.pending:
                    bodies.append(self._reply(fx, req, outcomes, seq=n))
                self.pending.pop(req.digest, None)
                self.proposed.discard(req.digest)
                self._cancel_timer(fx, self._req_timer(req.digest))
            fx.executed.append(Executed(n, d, proposal.block, applied, bodies))
            if n % self.cfg.checkpoint_interval == 0:
                cp = self._message(MsgKind.CHECKPOINT, self.view, n, dig=self.ledger.digest())
                self._broadcast(fx, cp)
                self._record_checkpoint(fx, cp)
        # PBFT restarts the request timer while requests remain outstanding.
        if not self.is_primary and self.view_active:
            for d in self.pending:
                t = self._req_timer(d)
                if t not in self.timers:
                    self._set_timer(fx, t, self.cfg.view_timeout)
        self._try_propose(fx, now)

    def _reply(self, fx: Effects, req: ConsensusMessage, outcomes: tuple[str, ...], seq: int) -> ReplyBody:
        body = ReplyBody(req.digest, outcomes)
        msg = self._message(MsgKind.REPLY, self.view, seq, payload=body)
        if seq:
            self.replies[req.digest] = msg
        fx.messages.append((req.payload.client, msg))
        return body

    # checkpoints

    def _on_checkpoint(self, fx: Effects, msg: ConsensusMessage, now: int) -> None:
        if msg.seq > self.stable_checkpoint:
            self._record_checkpoint(fx, msg)

    def _record_checkpoint(self, fx: Effects, msg: ConsensusMessage) -> None:
        votes = self.checkpoint_votes[(msg.seq, msg.digest)]
        votes.setdefault(msg.sender, msg)
        if len(votes) >= self.cfg.commit_quorum and msg.seq > self.stable_checkpoint and msg.seq <= self.last_executed:
            self.stable_checkpoint = msg.seq
            self.stable_proof = tuple(votes[a] for a in sorted(votes))[: self.cfg.commit_quorum]
            self._decide(fx, "stable_checkpoint", self.view, msg.seq, msg.digest)
            for key in [k for k in self.log if k[1] <= msg.seq]:
                del self.log[key]
            for key in [k for k in self.checkpoint_votes if k[0] <= msg.seq]:
                del self.checkpoint_votes[key]

    # view change

    def _buffer(self, fx: Effects, msg: ConsensusMessage) -> None:
        if len(self.buffer) >= self.cfg.buffer_window:
            self.stats["buffer_overflow"] += 1
            self._decide(fx, "buffer_drop", msg.view, msg.seq, msg.digest)
            return
        self.buffer.append(msg)

    def _prepared_certs(self) -> tuple[PreparedCert, ...]:
        best: dict[int, tuple[int, Slot]] = {}
        for (v, n), slot in self.log.items():
            if n <= self.stable_checkpoint or not slot.prepared or slot.pre_prepare is None:
                continue
            if n not in best or best[n][0] < v:
                best[n] = (v, slot)
        certs = []
        for n in sorted(best):
            v, slot = best[n]
            d = slot.pre_prepare.digest
            primary = self.cfg.primary(v)
            prepares = [m for (s, dd), m in sorted(slot.prepares.items()) if dd == d and s != primary]
            certs.append(PreparedCert(slot.pre_prepare, tuple(prepares[: self.cfg.prepare_quorum])))
        return tuple(certs)

    def _start_view_change(self, fx: Effects, target: int, now: int) -> None:
        if target <= self.view or (not self.view_active and target <= self.pending_view):
            return
        previous = self.view if self.view_active else self.pending_view
        self.view_active = False
        self.pending_view = target
        for t in sorted(self.timers):
            self._cancel_timer(fx, t)
        body = ViewChangeBody(self.stable_proof, self._prepared_certs())
        msg = self._message(MsgKind.VIEW_CHANGE, target, self.stable_checkpoint, payload=body)
        self._store_view_change(msg)
        self._decide(fx, "view_change", target, self.stable_checkpoint, msg.digest)
        self._broadcast(fx, msg)
        backoff = min(target - self.view, 6)
        self._set_timer(fx, f"vc:{target}", self.cfg.view_timeout * (1 << (backoff - 1)))
        del previous
        self._maybe_new_view(fx, target, now)

    def _store_view_change(self, msg: ConsensusMessage) -> None:
        # A replica's newer ViewChange supersedes its older ones.
        for v in [v for v, msgs in self.view_changes.items() if msg.sender in msgs and v < msg.view]:
            del self.view_changes[v][msg.sender]
            if not self.view_changes[v]:
                del self.view_changes[v]
        self.view_changes[msg.view].setdefault(msg.sender, msg)

    def _valid_view_change(self, msg: ConsensusMessage) -> bool:
        body = msg.payload
        if not isinstance(body, ViewChangeBody):
            return False
        if msg.seq > 0:
            senders = set()
            for cp in body.checkpoint_proof:
                if cp.kind is not MsgKind.CHECKPOINT or cp.seq != msg.seq or not self._validator_sig_ok(cp):
                    return False
                if cp.digest != body.checkpoint_proof[0].digest:
                    return False
                senders.add(cp.sender)
            if len(senders) < self.cfg.commit_quorum:
                return False
        for cert in body.prepared:
            pp = cert.pre_prepare
            if (
                pp.kind is not MsgKind.PRE_PREPARE
                or pp.view >= msg.view
                or pp.seq <= msg.seq
                or pp.sender != self.cfg.primary(pp.view)
                or not pp.payload_matches()
                or pp.payload is None
                or not self._validator_sig_ok(pp)
            ):
                return False
            senders = set()
            for p in cert.prepares:
                if (
                    p.kind is not MsgKind.PREPARE
                    or (p.view, p.seq, p.digest) != (pp.view, pp.seq, pp.digest)
                    or p.sender == pp.sender
                    or not self._validator_sig_ok(p)
                ):
                    return False
                senders.add(p.sender)
            if len(senders) < self.cfg.prepare_quorum:
                return False
        return True

    def _on_view_change(self, fx: Effects, msg: ConsensusMessage, now: int) -> None:
        if msg.view <= self.view:
            return
        if not self._valid_view_change(msg):
            self._decide(fx, "invalid_view_change", msg.view, msg.seq, msg.digest)
            return
        self._store_view_change(msg)
        current = self.pending_view if not self.view_active else self.view
        higher: dict[Address, int] = {}
        for v, msgs in self.view_changes.items():
            if v > current:
                for s in msgs:
                    higher[s] = min(higher.get(s, v), v)
        if len(higher) >= self.cfg.f + 1 and self.address not in higher:
            self._start_view_change(fx, min(higher.values()), now)
        self._maybe_new_view(fx, msg.view, now)

    def _compute_new_view(self, view: int, vcs: Sequence[ConsensusMessage]) -> tuple[int, list[tuple[int, bytes, Proposal]]]:
        min_s = max(vc.seq for vc in vcs)
        best: dict[int, ConsensusMessage] = {}
        for vc in vcs:
            for cert in vc.payload.prepared:
                pp = cert.pre_prepare
                if pp.seq <= min_s:
                    continue
                if pp.seq not in best or best[pp.seq].view < pp.view:
                    best[pp.seq] = pp
        max_s = max(best, default=min_s)
        plan = []
        for n in range(min_s + 1, max_s + 1):
            pp = best.get(n)
            if pp is None:
                plan.append((n, NULL_DIGEST, NULL_PROPOSAL))
            else:
                plan.append((n, pp.digest, pp.payload))
        return min_s, plan

    def _maybe_new_view(self, fx: Effects, view: int, now: int) -> None:
        if self.cfg.primary(view) != self.address or view in self.new_view_sent:
            return
        if self.view_active or self.pending_view != view:
            return
        vcs = self.view_changes.get(view, {})
        if len(vcs) < self.cfg.commit_quorum:
            return
        chosen = [vcs[self.address]] + [vcs[a] for a in sorted(vcs) if a != self.address]
        chosen = chosen[: self.cfg.commit_quorum]
        _, plan = self._compute_new_view(view, chosen)
        pre_prepares = tuple(self._message(MsgKind.PRE_PREPARE, view, n, payload=p, dig=d) for n, d, p in plan)
        body = NewViewBody(tuple(chosen), pre_prepares)
        msg = self._message(MsgKind.NEW_VIEW, view, 0, payload=body)
        self.new_view_sent.add(view)
        self._decide(fx, "new_view", view, 0, msg.digest)
        self._broadcast(fx, msg)
        self._enter_view(fx, view, chosen, pre_prepares, now)

    def _on_new_view(self, fx: Effects, msg: ConsensusMessage, now: int) -> None:
        v = msg.view
        if v <= self.view or msg.sender != self.cfg.primary(v) or not isinstance(msg.payload, NewViewBody):
            return
        if not self.view_active and v < self.pending_view:
            # Our ViewChange for a later view already summarised what we
            # prepared; acting in an earlier view now would contradict it.
            return
        body = msg.payload
        senders = set()
        for vc in body.view_changes:
            if vc.kind is not MsgKind.VIEW_CHANGE or vc.view != v or not vc.payload_matches():
                return self._decide(fx, "invalid_new_view", v, 0, msg.digest)
            if not self._validator_sig_ok(vc) or not self._valid_view_change(vc):
                return self._decide(fx, "invalid_new_view", v, 0, msg.digest)
            senders.add(vc.sender)
        if len(senders) < self.cfg.commit_quorum:
            return self._decide(fx, "invalid_new_view", v, 0, msg.digest)
        _, plan = self._compute_new_view(v, body.view_changes)
        if len(plan) != len(body.pre_prepares):
            return self._decide(fx, "invalid_new_view", v, 0, msg.digest)
        for (n, d, _), pp in zip(plan, body.pre_prepares):
            if (
                pp.kind is not MsgKind.PRE_PREPARE
                or (pp.view, pp.seq, pp.digest) != (v, n, d)
                or pp.sender != msg.sender
                or not pp.payload_matches()
                or not self._validator_sig_ok(pp)
            ):
                return self._decide(fx, "invalid_new_view", v, 0, msg.digest)
        self._decide(fx, "accept_new_view", v, 0, msg.digest)
        self._enter_view(fx, v, body.view_changes, body.pre_prepares, now)

    def _enter_view(
        self,
        fx: Effects,
        view: int,
        vcs: Sequence[ConsensusMessage],
        pre_prepares: Sequence[ConsensusMessage],
        now: int,
    ) -> None:
        for t in sorted(self.timers):
            self._cancel_timer(fx, t)
        self.view = view
        self.pending_view = view
        self.view_active = True
        self.proposed.clear()
        max_s = max((pp.seq for pp in pre_prepares), default=0)
        self.next_seq = max(max_s, self.last_executed) + 1
        self._decide(fx, "enter_view", view, self.next_seq, b"")
        for pp in pre_prepares:
            self._store_payload(pp)
            if pp.seq > self.stable_checkpoint:
                self._accept_pre_prepare(fx, pp, now)
        for old in [v for v in self.view_changes if v <= view]:
            del self.view_changes[old]
        buffered, self.buffer = list(self.buffer), deque()
        for m in buffered:
            if m.view > view:
                self.buffer.append(m)
            elif m.view == view:
                sub = self.handle_message(m, now)
                fx.extend(sub)
        primary = self.cfg.primary(view)
        for d, req in self.pending.items():
            if primary == self.address:
                continue
            fx.messages.append((primary, req))
            self._set_timer(fx, self._req_timer(d), self.cfg.view_timeout)
        self._execute(fx, now)
        self._try_propose(fx, now)

    # inspection

    def summary(self) -> dict:
        return {
            "address": self.address.hex(),
            "view": self.view,
            "last_executed": self.last_executed,
            "height": self.ledger.height,
            "stable_checkpoint": self.stable_checkpoint,
            "committed": {n: d.hex() for n, d in sorted(self.committed.items())},
        }


class EquivocatingReplica(Replica):
    """Byzantine validator that equivocates whenever it speaks.

    As primary it signs two different batches for the same sequence number
    and sends each to a different subset of backups (chosen by ``split``),
    then immediately votes Prepare and Commit for each batch towards the
    replicas that received it.  As a backup it sends Prepare and Commit
    votes for a fabricated digest alongside the honest ones.
    """

    def __init__(self, *args, split: Optional[Callable[[list[Address]], set[Address]]] = None, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.split = split or (lambda addrs: set(addrs[: len(addrs) // 2 + len(addrs) % 2]))

    def _propose(self, fx: Effects, proposal: Proposal, now: int) -> None:
        seq = self.next_seq
        self.next_seq += 1
        block_b = replace(proposal.block, logical_time=proposal.block.logical_time + 1)
        block_b = replace(block_b, proposer_sig=self.crypto.sign(self.key, block_b.signing_bytes()))
        other = Proposal(proposal.requests, block_b)
        msg_a = self._message(MsgKind.PRE_PREPARE, self.view, seq, payload=proposal)
        msg_b = self._message(MsgKind.PRE_PREPARE, self.view, seq, payload=other)
        backups = [a for a in self.cfg.validators if a != self.address]
        group_a = self.split(list(backups))
        for addr in backups:
            m = msg_a if addr in group_a else msg_b
            fx.messages.append((addr, m))
            fx.messages.append((addr, self._message(MsgKind.PREPARE, self.view, seq, dig=m.digest)))
            fx.messages.append((addr, self._message(MsgKind.COMMIT, self.view, seq, dig=m.digest)))
        self._decide(fx, "equivocate", self.view, seq, msg_a.digest)
        for req in proposal.requests:
            self.proposed.add(req.digest)
        self._accept_pre_prepare(fx, msg_a, now)

    def _broadcast(self, fx: Effects, msg: ConsensusMessage) -> None:
        super()._broadcast(fx, msg)
        if msg.kind in (MsgKind.PREPARE, MsgKind.COMMIT):
            fake = self._message(msg.kind, msg.view, msg.seq, dig=digest(b"forged" + msg.digest))
            super()._broadcast(fx, fake)


def check_agreement(replicas: Iterable[Replica]) -> list[tuple[int, list[str]]]:
    """Sequence numbers at which the given replicas committed different digests."""
    by_seq: dict[int, set[bytes]] = defaultdict(set)
    for r in replicas:
        for n, d in r.committed.items():
            by_seq[n].add(d)
    return [(n, sorted(d.hex()[:16] for d in ds)) for n, ds in sorted(by_seq.items()) if len(ds) > 1]
