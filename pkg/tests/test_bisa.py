import random
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from iovsim import bisa
from iovsim.crypto import Ed25519Provider

from support import (
    ALL_STEPS,
    Net,
    apply_mutation,
    field_mutations,
    run_handshake,
    tamper_campaign,
    tampered_run,
    Unchanged,
)


@pytest.fixture
def peers(net):
    net.register("veh0", "veh1", "veh2")
    return net


# initiate


def test_hello_carries_fresh_nonce_and_ephemeral(peers):
    rng = random.Random(0)
    p1, h1 = bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh1"), peers.state, rng)
    p2, h2 = bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh1"), peers.state, rng)
    assert h1.step is bisa.Step.HELLO
    assert len(h1.nonce) == bisa.NONCE_SIZE == 16
    assert h1.nonce != h2.nonce
    assert h1.ephemeral_pub != h2.ephemeral_pub
    assert h1.transcript_sig == b""
    assert (h1.sender_addr, h1.peer_addr) == (peers.addr("veh0"), peers.addr("veh1"))


def test_initiate_to_absent_peer(peers):
    peers.key("ghost")
    with pytest.raises(bisa.UnknownIdentity):
        bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("ghost"), peers.state, random.Random(0))


def test_initiate_to_revoked_peer(peers):
    peers.revoke("veh1")
    with pytest.raises(bisa.UnknownIdentity):
        bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh1"), peers.state, random.Random(0))


def test_initiate_when_locally_revoked(peers):
    peers.revoke("veh0")
    with pytest.raises(bisa.RevokedLocal):
        bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh1"), peers.state, random.Random(0))


# respond


def test_response_signature_verifies_under_ledger_key(peers):
    rng = random.Random(1)
    _, hello = bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh1"), peers.state, rng)
    session, response = bisa.respond(peers.crypto, peers.local("veh1"), hello, peers.state, rng)
    assert response.step is bisa.Step.RESPONSE
    assert response.peer_nonce == hello.nonce
    assert not session.established
    signed = b"iovsim/bisa/response\x00" + hello.header_bytes() + replace(response, transcript_sig=b"").header_bytes()
    vk = peers.state.identity(peers.addr("veh1")).verify_key
    assert peers.crypto.verify(vk, signed, response.transcript_sig)


def test_hello_from_unregistered_sender(peers):
    # Build a hello on a ledger that knows the stranger, deliver to one that does not.
    other = Net.create(peers.crypto)
    other.keys["veh1"] = peers.keys["veh1"]
    other.register("stranger", "veh1")
    _, hello = bisa.initiate(peers.crypto, other.local("stranger"), peers.addr("veh1"), other.state, random.Random(0))
    with pytest.raises(bisa.UnknownIdentity):
        bisa.respond(peers.crypto, peers.local("veh1"), hello, peers.state, random.Random(0))


def test_hello_for_someone_else(peers):
    _, hello = bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh2"), peers.state, random.Random(0))
    with pytest.raises(bisa.AddrMismatch):
        bisa.respond(peers.crypto, peers.local("veh1"), hello, peers.state, random.Random(0))


# complete


def test_honest_exchange_agrees_on_key(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    assert hs.initiator.established and hs.responder.established
    assert hs.initiator.session_key == hs.responder.session_key
    assert hs.initiator.session_id == hs.responder.session_id
    assert hs.initiator.key_fingerprint == hs.responder.key_fingerprint
    assert (hs.initiator.local_addr, hs.initiator.peer_addr) == (hs.responder.peer_addr, hs.responder.local_addr)


def test_substituted_ephemeral_in_response(peers):
    rng = random.Random(2)
    pending, hello = bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh1"), peers.state, rng)
    _, response = bisa.respond(peers.crypto, peers.local("veh1"), hello, peers.state, rng)
    mallory = peers.crypto.agreement_key("mallory/eph")
    with pytest.raises(bisa.BadTranscriptSig):
        bisa.complete(peers.crypto, pending, replace(response, ephemeral_pub=mallory.public), peers.state)


def test_replayed_old_response(peers):
    old = run_handshake(peers, "veh0", "veh1", seed=3)
    pending, _ = bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh1"), peers.state, random.Random(4))
    with pytest.raises(bisa.NonceMismatch):
        bisa.complete(peers.crypto, pending, old.response, peers.state)


def test_replayed_confirm_rejected(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    with pytest.raises(bisa.MalformedHandshake):
        bisa.accept_confirm(peers.crypto, hs.responder, hs.confirm, peers.state)


def test_message_encoding_round_trip(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    for msg in (hs.hello, hs.response, hs.confirm):
        assert bisa.HandshakeMessage.decode(msg.encode()) == msg
    with pytest.raises(bisa.DecodeError):
        bisa.HandshakeMessage.decode(hs.hello.encode()[:-1])


# tampering


def test_every_field_is_mutated(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    touched = {name for name, _ in field_mutations(hs.response, {})}
    assert touched == set(bisa.HandshakeMessage.FIELDS)


@pytest.mark.parametrize("step", ALL_STEPS, ids=lambda s: s.name)
@pytest.mark.parametrize("field", bisa.HandshakeMessage.FIELDS)
def test_single_field_tamper_never_accepted(peers, step, field):
    hs = run_handshake(peers, "veh0", "veh1", seed=5)
    template = {bisa.Step.HELLO: hs.hello, bisa.Step.RESPONSE: hs.response, bisa.Step.CONFIRM: hs.confirm}[step]
    ops = [op for name, op in field_mutations(template, {}) if name == field]
    runs = 0
    for seed, op in enumerate(ops):
        try:
            accepted = tampered_run(peers, "veh0", "veh1", step, lambda m: apply_mutation(m, field, op) or m, seed)
        except Unchanged:
            continue
        runs += 1
        assert not accepted, (step, field, op)
    assert runs > 0


def test_tamper_campaign_counts(peers):
    runs, accepted = tamper_campaign(peers, wire=False)
    assert runs > 3000
    assert accepted == 0


def test_noop_mutation_is_not_counted(peers):
    # Guards the harness: a mutation that changes nothing must not count as a tamper run.
    def reencode(msg):
        out = bisa.HandshakeMessage.decode(msg.encode())
        return replace(out, nonce=bytes(out.nonce))

    with pytest.raises(Unchanged):
        tampered_run(peers, "veh0", "veh1", bisa.Step.CONFIRM, reencode)


# sealed records


def test_seal_open_round_trip(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    record = bisa.seal(hs.initiator, b"hello bus")
    assert bisa.open_record(hs.responder, record) == b"hello bus"
    back = bisa.seal(hs.responder, b"ack")
    assert bisa.open_record(hs.initiator, back) == b"ack"


def test_two_seals_differ(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    assert bisa.seal(hs.initiator, b"same") != bisa.seal(hs.initiator, b"same")
    assert hs.initiator.send_counter == 2


@pytest.mark.parametrize("size", [0, 1, 64, 1000])
def test_record_overhead(peers, size):
    hs = run_handshake(peers, "veh0", "veh1")
    assert len(bisa.seal(hs.initiator, bytes(size))) - size == 32
    assert bisa.RECORD_OVERHEAD == 32


def test_redelivered_record_is_replay(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    record = bisa.seal(hs.initiator, b"once")
    bisa.open_record(hs.responder, record)
    with pytest.raises(bisa.ReplayDetected):
        bisa.open_record(hs.responder, record)


def test_out_of_order_older_record_is_replay(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    first, second = bisa.seal(hs.initiator, b"1"), bisa.seal(hs.initiator, b"2")
    bisa.open_record(hs.responder, second)
    with pytest.raises(bisa.ReplayDetected):
        bisa.open_record(hs.responder, first)


def test_every_bit_flip_fails(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    record = bisa.seal(hs.initiator, bytes(range(64)))
    opened = 0
    for bit in range(len(record) * 8):
        flipped = bytearray(record)
        flipped[bit // 8] ^= 1 << (bit % 8)
        try:
            bisa.open_record(hs.responder, bytes(flipped))
            opened += 1
        except bisa.AuthFail:
            pass
    assert opened == 0
    assert hs.responder.recv_counter == 0
    assert bisa.open_record(hs.responder, record) == bytes(range(64))


def test_record_from_other_session(peers):
    a = run_handshake(peers, "veh0", "veh1", seed=1)
    b = run_handshake(peers, "veh0", "veh1", seed=2)
    with pytest.raises(bisa.AuthFail):
        bisa.open_record(b.responder, bisa.seal(a.initiator, b"x"))


def test_own_record_reflected_back(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    with pytest.raises(bisa.AuthFail):
        bisa.open_record(hs.initiator, bisa.seal(hs.initiator, b"echo"))


def test_seal_before_established(peers):
    rng = random.Random(0)
    _, hello = bisa.initiate(peers.crypto, peers.local("veh0"), peers.addr("veh1"), peers.state, rng)
    half, _ = bisa.respond(peers.crypto, peers.local("veh1"), hello, peers.state, rng)
    with pytest.raises(bisa.SessionNotEstablished):
        bisa.seal(half, b"early")
    with pytest.raises(bisa.SessionNotEstablished):
        bisa.open_record(half, bytes(64))


def test_record_session_id(peers):
    hs = run_handshake(peers, "veh0", "veh1")
    assert bisa.record_session_id(bisa.seal(hs.initiator, b"")) == hs.initiator.session_id


def test_ed25519_handshake():
    net = Net.create(Ed25519Provider())
    net.register("veh0", "veh1")
    hs = run_handshake(net, "veh0", "veh1")
    assert hs.initiator.session_key == hs.responder.session_key
    assert bisa.open_record(hs.responder, bisa.seal(hs.initiator, b"real crypto")) == b"real crypto"
    with pytest.raises(bisa.BadTranscriptSig):
        pending, hello = bisa.initiate(net.crypto, net.local("veh0"), net.addr("veh1"), net.state, random.Random(1))
        _, response = bisa.respond(net.crypto, net.local("veh1"), hello, net.state, random.Random(2))
        sig = bytearray(response.transcript_sig)
        sig[0] ^= 1
        bisa.complete(net.crypto, pending, replace(response, transcript_sig=bytes(sig)), net.state)


# properties

_shared = Net.create()
_shared.register(*(f"veh{i}" for i in range(4)))


@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**32))
def test_prop_key_agreement(a, b, seed):
    if a == b:
        return
    hs = run_handshake(_shared, f"veh{a}", f"veh{b}", seed=seed)
    assert hs.initiator.established and hs.responder.established
    assert hs.initiator.session_key == hs.responder.session_key


@given(st.lists(st.binary(max_size=40), min_size=1, max_size=8), st.data())
def test_prop_replay_rejected(payloads, data):
    hs = run_handshake(_shared, "veh0", "veh1", seed=len(payloads))
    records = [bisa.seal(hs.initiator, p) for p in payloads]
    for rec, p in zip(records, payloads):
        assert bisa.open_record(hs.responder, rec) == p
    replayed = data.draw(st.sampled_from(records))
    with pytest.raises(bisa.ReplayDetected):
        bisa.open_record(hs.responder, replayed)
    assert hs.responder.recv_counter == len(payloads)
