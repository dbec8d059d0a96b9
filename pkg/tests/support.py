"""Shared builders for the test suite."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from iovsim import bisa
from iovsim.crypto import CryptoProvider, DeterministicProvider, SigningKey
from iovsim.dbnr import make_upsert
from iovsim.ledger import (
    Block,
    Layer,
    LedgerState,
    LedgerTransaction,
    Locator,
    Role,
    append_block,
    derive_address,
    genesis_state,
    make_genesis,
    make_registration,
    make_revocation,
)


# Smallest runnable scenario: two vehicles, one RSU, a single validator.
MINIMAL = {
    "schema_version": 1,
    "name": "minimal",
    "seed": 11,
    "t_end": 400,
    "topology": {"rsus": ["rsu0"]},
    "validators": ["rsu0"],
    "vehicles": [{"id": "veh0", "attach": "rsu0"}, {"id": "veh1", "attach": "rsu0"}],
    "workload": [{"t": 100, "op": "handshake", "from": "veh0", "to": "veh1"}],
    "expectations": [{"metric": "sessions_established", "op": ">=", "value": 1}],
}


# Acceptance outcomes recorded by test_acceptance.py and printed by conftest.py.
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@dataclass
class Net:
    """Genesis with ``n`` RSUs plus helpers to grow the ledger block by block."""

    crypto: CryptoProvider
    rsu_keys: list[SigningKey]
    blocks: list[Block]
    state: LedgerState
    keys: dict[str, SigningKey] = field(default_factory=dict)
    clock: int = 0

    @classmethod
    def create(cls, crypto: CryptoProvider | None = None, n: int = 4) -> "Net":
        crypto = crypto or DeterministicProvider(7)
        rsu_keys = [crypto.signing_key(f"rsu{i}") for i in range(n)]
        genesis = make_genesis(crypto, [(k, Role.RSU) for k in rsu_keys])
        net = cls(crypto, rsu_keys, [genesis], genesis_state(genesis, crypto))
        for i, k in enumerate(rsu_keys):
            net.keys[f"rsu{i}"] = k
        return net

    def addr(self, label: str) -> bytes:
        return derive_address(self.crypto, self.keys[label].public)

    def block(self, txs: list[LedgerTransaction], proposer: int = 0) -> Block:
        self.clock += 10
        return sign_block(self.crypto, self.state, txs, self.rsu_keys[proposer], self.clock)

    def commit(self, txs: list[LedgerTransaction], proposer: int = 0) -> Block:
        block = self.block(txs, proposer)
        self.state = append_block(self.state, block, self.crypto)
        self.blocks.append(block)
        return block

    def key(self, label: str) -> SigningKey:
        if label not in self.keys:
            self.keys[label] = self.crypto.signing_key(label)
        return self.keys[label]

    def register(self, *labels: str, role: Role = Role.VEHICLE, sponsor: str = "rsu0", upsert: bool = False) -> Block:
        txs = []
        for label in labels:
            key = self.key(label)
            txs.append(make_registration(self.crypto, key, role, sponsor_key=self.keys[sponsor]))
            if upsert:
                txs.append(make_upsert(self.crypto, key, "v2x0", Locator(Layer.PRIMARY, "rsu0"), 0, 10_000))
        return self.commit(txs)

    def revoke(self, label: str, by: str = "rsu1") -> Block:
        return self.commit([make_revocation(self.crypto, self.keys[by], self.addr(label))])

    def local(self, label: str) -> bisa.LocalIdentity:
        return bisa.LocalIdentity.from_key(self.crypto, self.keys[label])


def sign_block(crypto: CryptoProvider, state: LedgerState, txs, proposer: SigningKey, t: int) -> Block:
    block = Block(state.height + 1, state.head_hash, tuple(txs), derive_address(crypto, proposer.public), b"", t)
    return replace(block, proposer_sig=crypto.sign(proposer, block.signing_bytes()))


def three_block_chain(crypto: CryptoProvider | None = None) -> Net:
    """Genesis plus two blocks touching every transaction kind."""
    net = Net.create(crypto)
    net.register("veh0", "veh1", upsert=True)
    veh0 = net.keys["veh0"]
    net.commit(
        [
            make_upsert(net.crypto, veh0, "v2x0", Locator(Layer.PRIMARY, "rsu2"), 1, 20_000),
            make_revocation(net.crypto, net.keys["rsu1"], net.addr("veh1")),
        ],
        proposer=1,
    )
    return net


@dataclass
class Handshake:
    hello: bisa.HandshakeMessage
    response: bisa.HandshakeMessage
    confirm: bisa.HandshakeMessage
    initiator: bisa.SessionContext
    responder: bisa.SessionContext


def run_handshake(net: Net, a: str, b: str, seed: int = 0, ledger: LedgerState | None = None) -> Handshake:
    ledger = ledger or net.state
    rng = random.Random(seed)
    pending, hello = bisa.initiate(net.crypto, net.local(a), net.addr(b), ledger, rng)
    resp_session, response = bisa.respond(net.crypto, net.local(b), hello, ledger, rng)
    init_session, confirm = bisa.complete(net.crypto, pending, response, ledger)
    bisa.accept_confirm(net.crypto, resp_session, confirm, ledger)
    return Handshake(hello, response, confirm, init_session, resp_session)


# Handshake tampering harness

ALL_STEPS = (bisa.Step.HELLO, bisa.Step.RESPONSE, bisa.Step.CONFIRM)


def field_mutations(msg: bisa.HandshakeMessage, substitutes: dict[str, list[bytes]]):
    """Single-field mutations of ``msg`` as ``(field, op)`` pairs.

    Ops: every bit flip, truncation, extension, emptying, substitution by a
    value lifted from another honest handshake, and every other step tag.
    """
    for name in bisa.HandshakeMessage.FIELDS:
        value = getattr(msg, name)
        if name == "step":
            yield from ((name, ("step", other)) for other in bisa.Step if other is not value)
            continue
        yield from ((name, ("flip", i)) for i in range(len(value) * 8))
        yield from ((name, (op,)) for op in ("truncate", "extend", "empty"))
        yield from ((name, ("sub", v)) for v in substitutes.get(name, []))


def apply_mutation(msg: bisa.HandshakeMessage, name: str, op: tuple) -> bisa.HandshakeMessage | None:
    """The mutated message, or None when the op leaves ``msg`` unchanged."""
    value = getattr(msg, name)
    kind = op[0]
    if kind == "step":
        new = op[1]
    elif kind == "flip":
        flipped = bytearray(value)
        flipped[op[1] // 8] ^= 1 << (op[1] % 8)
        new = bytes(flipped)
    elif kind == "truncate":
        new = value[:-1]
    elif kind == "extend":
        new = value + b"\x00"
    elif kind == "empty":
        new = b""
    else:
        new = op[1]
    return None if new == value else replace(msg, **{name: new})


def flip_wire_bit(msg: bisa.HandshakeMessage, bit: int) -> bisa.HandshakeMessage | None:
    """Flip one bit of the encoding; None if the result no longer decodes."""
    raw = bytearray(msg.encode())
    raw[bit // 8] ^= 1 << (bit % 8)
    try:
        return bisa.HandshakeMessage.decode(bytes(raw))
    except bisa.DecodeError:
        return None


class Unchanged(Exception):
    """The mutation was a no-op on the live message."""


def tampered_run(net: Net, a: str, b: str, step: bisa.Step, mutate, seed: int = 0) -> bool:
    """Run a handshake with the ``step`` message replaced by ``mutate(message)``.

    ``mutate`` returns None for an undecodable message, which counts as
    dropped. Returns True if the receiver of the tampered message, or anyone
    downstream of it, ends up with an established session.
    """
    ledger = net.state
    rng = random.Random(seed)

    def tamper(msg):
        out = mutate(msg)
        if out == msg:
            raise Unchanged
        return out

    pending, hello = bisa.initiate(net.crypto, net.local(a), net.addr(b), ledger, rng)
    if step is bisa.Step.HELLO and (hello := tamper(hello)) is None:
        return False
    try:
        resp_session, response = bisa.respond(net.crypto, net.local(b), hello, ledger, rng)
    except bisa.BisaError:
        return False
    if step is bisa.Step.RESPONSE and (response := tamper(response)) is None:
        return False
    try:
        init_session, confirm = bisa.complete(net.crypto, pending, response, ledger)
    except bisa.BisaError:
        return False
    if step is not bisa.Step.CONFIRM:
        return init_session.established
    if (confirm := tamper(confirm)) is None:
        return False
    try:
        bisa.accept_confirm(net.crypto, resp_session, confirm, ledger)
    except bisa.BisaError:
        return False
    return resp_session.established


def tamper_campaign(net: Net, a: str = "veh0", b: str = "veh1", wire: bool = True) -> tuple[int, int]:
    """(tampered runs, accepted runs) over every field mutation and, with
    ``wire``, every encoded bit of every handshake message."""
    reference = run_handshake(net, a, b, seed=99)
    other = run_handshake(net, "veh2", b, seed=98)
    substitutes = {
        "sender_addr": [net.addr("veh2"), net.addr(b), net.addr(a)],
        "peer_addr": [net.addr("veh2"), net.addr(a), net.addr(b)],
        "nonce": [other.hello.nonce, other.response.nonce],
        "peer_nonce": [other.hello.nonce, other.response.nonce],
        "ephemeral_pub": [other.hello.ephemeral_pub, other.response.ephemeral_pub],
        "transcript_sig": [other.response.transcript_sig, other.confirm.transcript_sig],
    }
    mutators = []
    for step, template in zip(ALL_STEPS, (reference.hello, reference.response, reference.confirm)):
        for name, op in field_mutations(template, substitutes):
            mutators.append((step, lambda m, name=name, op=op: apply_mutation(m, name, op) or m))
        if wire:
            for bit in range(len(template.encode()) * 8):
                mutators.append((step, lambda m, bit=bit: flip_wire_bit(m, bit)))
    runs = accepted = 0
    for seed, (step, mutate) in enumerate(mutators):
        try:
            accepted += tampered_run(net, a, b, step, mutate, seed=seed)
        except Unchanged:
            continue
        runs += 1
    return runs, accepted
