import hashlib
import random
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from iovsim.crypto import DeterministicProvider, Ed25519Provider, MalformedKey
from iovsim.dbnr import make_upsert
from iovsim.ledger import (
    Block,
    BadHeight,
    BadParentHash,
    BadProposerSig,
    BadSignature,
    DuplicateIdentity,
    InvalidTxInBlock,
    Layer,
    LedgerState,
    LedgerTransaction,
    Locator,
    Role,
    Status,
    StaleVersion,
    TxKind,
    UnknownSubmitter,
    UnsponsoredRegistration,
    Unauthorized,
    RevokedSubmitter,
    append_block,
    apply_all,
    apply_transaction,
    derive_address,
    dump_blocks_jsonl,
    genesis_state,
    load_blocks_jsonl,
    make_genesis,
    make_registration,
    make_revocation,
    read_genesis_json,
    validate_chain,
    write_genesis_json,
)

from support import Net, sign_block, three_block_chain

# sha256 of 32 zero bytes, first 20 bytes; computed once with hashlib.
ZERO_KEY_ADDRESS = "66687aadf862bd776c8fc18b8e9f8e2008971485"


# derive_address


def test_derive_address_is_deterministic(crypto):
    key = crypto.signing_key("veh0")
    assert derive_address(crypto, key.public) == derive_address(crypto, key.public)
    assert len(derive_address(crypto, key.public)) == 20


def test_derive_address_zero_key_vector(crypto):
    assert hashlib.sha256(bytes(32)).digest()[:20].hex() == ZERO_KEY_ADDRESS
    assert derive_address(crypto, bytes(32)).hex() == ZERO_KEY_ADDRESS


def test_derive_address_no_collisions_over_1000_keys(crypto):
    rng = random.Random(2024)
    keys = {rng.randbytes(32) for _ in range(1000)}
    assert len(keys) == 1000
    addresses = [derive_address(crypto, k) for k in keys]
    # brute-force pairwise comparison
    clashes = sum(1 for i in range(len(addresses)) for j in range(i) if addresses[i] == addresses[j])
    assert clashes == 0


@pytest.mark.parametrize("provider", [DeterministicProvider(0), Ed25519Provider(0)])
def test_derive_address_rejects_malformed_key(provider):
    with pytest.raises(MalformedKey):
        derive_address(provider, b"\x01" * 31)


# apply_transaction


def test_register_fresh_identity(net):
    key = net.key("veh0")
    tx = make_registration(net.crypto, key, Role.VEHICLE, sponsor_key=net.keys["rsu0"])
    after = apply_transaction(net.state, tx, net.crypto)
    assert len(after.identities) == len(net.state.identities) + 1
    rec = after.identity(net.addr("veh0"))
    assert rec.status is Status.ACTIVE and rec.role is Role.VEHICLE


def test_register_duplicate_leaves_state_unchanged(net):
    net.register("veh0")
    before = net.state.encode()
    tx = make_registration(net.crypto, net.keys["veh0"], Role.VEHICLE, sponsor_key=net.keys["rsu1"])
    with pytest.raises(DuplicateIdentity):
        apply_transaction(net.state, tx, net.crypto)
    assert net.state.encode() == before


def test_self_registration_needs_open_registration(net):
    tx = make_registration(net.crypto, net.key("veh0"), Role.VEHICLE)
    with pytest.raises(UnsponsoredRegistration):
        apply_transaction(net.state, tx, net.crypto)
    after = apply_transaction(net.state, tx, net.crypto, open_registration=True)
    assert after.is_active(net.addr("veh0"))


def test_component_must_be_sponsored_by_a_vehicle(net):
    net.register("veh0")
    comp = net.key("veh0.camera")
    by_rsu = make_registration(net.crypto, comp, Role.VEHICLE_COMPONENT, sponsor_key=net.keys["rsu0"])
    with pytest.raises(UnsponsoredRegistration):
        apply_transaction(net.state, by_rsu, net.crypto)
    by_vehicle = make_registration(net.crypto, comp, Role.VEHICLE_COMPONENT, sponsor_key=net.keys["veh0"])
    assert apply_transaction(net.state, by_vehicle, net.crypto).is_active(net.addr("veh0.camera"))


def test_forged_sponsor_endorsement_rejected(net):
    fake = net.crypto.signing_key("adv:fake-rsu")
    tx = make_registration(net.crypto, net.key("veh0"), Role.VEHICLE, sponsor_key=fake)
    with pytest.raises(UnsponsoredRegistration):
        apply_transaction(net.state, tx, net.crypto)
    # claim rsu0 as sponsor but sign the endorsement with another key
    reg = replace(tx.payload, sponsor=net.addr("rsu0"))
    forged = LedgerTransaction(TxKind.REGISTER_IDENTITY, reg, reg.address)
    forged = replace(forged, signature=net.crypto.sign(net.keys["veh0"], forged.signing_bytes()))
    with pytest.raises(BadSignature):
        apply_transaction(net.state, forged, net.crypto)


def test_upsert_same_version_is_stale(net):
    net.register("veh0", upsert=True)
    key = net.keys["veh0"]
    loc = Locator(Layer.PRIMARY, "rsu1")
    v2 = make_upsert(net.crypto, key, "v2x0", loc, 1, 900)
    net.commit([v2])
    assert net.state.dbnr[net.addr("veh0")].version == 2
    with pytest.raises(StaleVersion):
        apply_transaction(net.state, make_upsert(net.crypto, key, "v2x0", loc, 1, 900), net.crypto)


def test_unknown_and_revoked_submitters(net):
    stranger = net.crypto.signing_key("stranger")
    with pytest.raises(UnknownSubmitter):
        apply_transaction(net.state, make_revocation(net.crypto, stranger, net.addr("rsu0")), net.crypto)
    net.register("veh0", "veh1")
    net.revoke("veh0")
    tx = make_upsert(net.crypto, net.keys["veh0"], "v2x0", Locator(Layer.PRIMARY, "rsu0"), 0, 900)
    with pytest.raises(RevokedSubmitter):
        apply_transaction(net.state, tx, net.crypto)


def test_vehicle_cannot_revoke_another_vehicle(net):
    net.register("veh0", "veh1")
    with pytest.raises(Unauthorized):
        apply_transaction(net.state, make_revocation(net.crypto, net.keys["veh0"], net.addr("veh1")), net.crypto)


def test_bad_transaction_signature(net):
    net.register("veh0")
    tx = make_revocation(net.crypto, net.keys["veh0"], net.addr("veh0"))
    sig = bytearray(tx.signature)
    sig[0] ^= 1
    with pytest.raises(BadSignature):
        apply_transaction(net.state, replace(tx, signature=bytes(sig)), net.crypto)


# append_block


def test_block_with_wrong_parent_hash(net):
    block = net.block([make_registration(net.crypto, net.key("veh0"), Role.VEHICLE, sponsor_key=net.keys["rsu0"])])
    bad = sign_block(net.crypto, replace(net.state, head_hash=bytes(32)), block.txs, net.rsu_keys[0], block.logical_time)
    with pytest.raises(BadParentHash):
        append_block(net.state, bad, net.crypto)


def test_empty_non_genesis_block_rejected(net):
    with pytest.raises(InvalidTxInBlock) as info:
        append_block(net.state, net.block([]), net.crypto)
    assert info.value.cause == "EmptyBlock"


def test_block_height_and_proposer_checked(net):
    tx = make_registration(net.crypto, net.key("veh0"), Role.VEHICLE, sponsor_key=net.keys["rsu0"])
    block = net.block([tx])
    with pytest.raises(BadHeight):
        append_block(net.state, replace(block, height=5), net.crypto)
    vehicle_signed = sign_block(net.crypto, net.state, [tx], net.key("veh9"), block.logical_time)
    with pytest.raises(BadProposerSig):
        append_block(net.state, vehicle_signed, net.crypto)


def test_invalid_tx_rejects_whole_block(net):
    good = make_registration(net.crypto, net.key("veh0"), Role.VEHICLE, sponsor_key=net.keys["rsu0"])
    block = net.block([good, good])
    with pytest.raises(InvalidTxInBlock) as info:
        append_block(net.state, block, net.crypto)
    assert (info.value.index, info.value.cause) == (1, "DuplicateIdentity")


def test_three_tx_block_equals_sequential_fold(net):
    keys = [net.key(f"veh{i}") for i in range(2)]
    txs = [
        make_registration(net.crypto, keys[0], Role.VEHICLE, sponsor_key=net.keys["rsu0"]),
        make_registration(net.crypto, keys[1], Role.VEHICLE, sponsor_key=net.keys["rsu2"]),
        make_upsert(net.crypto, keys[0], "v2x0", Locator(Layer.PRIMARY, "rsu0"), 0, 700),
    ]
    block = net.block(txs)
    via_block = append_block(net.state, block, net.crypto)
    folded = net.state
    for tx in txs:
        folded = apply_transaction(folded, tx, net.crypto, logical_time=block.logical_time)
    assert dict(via_block.identities) == dict(folded.identities)
    assert dict(via_block.dbnr) == dict(folded.dbnr)
    assert via_block.head == block and via_block.height == 1


# validate_chain


def test_validate_genesis_only(crypto):
    genesis = make_genesis(crypto, [])
    report = validate_chain([genesis], crypto)
    assert report.ok
    assert dict(report.state.identities) == {} and report.state.head == genesis


def test_validate_genesis_with_validators(net):
    report = validate_chain(net.blocks, net.crypto)
    assert report.ok and len(report.state.identities) == 4


def test_genesis_header_must_be_zero(net):
    assert validate_chain([replace(net.blocks[0], logical_time=3)], net.crypto).reason == "BadGenesis"
    vehicle_in_genesis = make_genesis(net.crypto, [(net.key("veh0"), Role.VEHICLE)])
    with pytest.raises(InvalidTxInBlock):
        genesis_state(vehicle_in_genesis, net.crypto)


def test_flipped_tx_signature_reported_at_its_block(crypto):
    net = three_block_chain(crypto)
    # The proposer re-signs the block, so only the transaction signature is wrong.
    parent = validate_chain(net.blocks[:2], crypto).state
    victim = net.blocks[2]
    tx = victim.txs[0]
    sig = bytearray(tx.signature)
    sig[5] ^= 0x10
    bad_txs = (replace(tx, signature=bytes(sig)),) + victim.txs[1:]
    bad = sign_block(crypto, parent, bad_txs, net.rsu_keys[1], victim.logical_time)
    report = validate_chain(net.blocks[:2] + [bad], crypto)
    assert (report.ok, report.failed_index, report.reason) == (False, 2, "BadSignature")
    assert report.state.height == 1


def test_validate_chain_equals_iterated_append(crypto):
    net = three_block_chain(crypto)
    state = genesis_state(net.blocks[0], crypto)
    for block in net.blocks[1:]:
        state = append_block(state, block, crypto)
    assert validate_chain(net.blocks, crypto).state.encode() == state.encode() == net.state.encode()


def test_validate_chain_accepts_encoded_blocks_and_reports_decode_errors(crypto):
    net = three_block_chain(crypto)
    raw = [b.encode() for b in net.blocks]
    assert validate_chain(raw, crypto).ok
    report = validate_chain(raw[:2] + [raw[2][:-1]], crypto)
    assert report.failed_index == 2 and report.reason.startswith("DecodeError")
    assert validate_chain([], crypto).reason == "EmptyChain"


def test_immutability_sample(crypto):
    """Every byte of the last block, flipped: detected at or before that block."""
    net = three_block_chain(crypto)
    raw = [b.encode() for b in net.blocks]
    last = raw[2]
    for pos in range(len(last)):
        mutated = bytearray(last)
        mutated[pos] ^= 0x01
        report = validate_chain(raw[:2] + [bytes(mutated)], crypto)
        assert not report.ok and report.failed_index <= 2, pos


# files and encodings


def test_genesis_json_round_trip(net, tmp_path):
    path = tmp_path / "genesis.json"
    names = {net.addr(f"rsu{i}"): f"rsu{i}" for i in range(4)}
    write_genesis_json(path, net.blocks[0], names)
    block, nodes = read_genesis_json(path)
    assert block == net.blocks[0] and nodes == names


def test_blocks_jsonl_round_trip(crypto, tmp_path):
    net = three_block_chain(crypto)
    path = tmp_path / "blocks.jsonl"
    dump_blocks_jsonl(path, net.blocks)
    raw = load_blocks_jsonl(path)
    assert [Block.decode(r) for r in raw] == net.blocks
    assert validate_chain(raw, crypto).state.encode() == net.state.encode()


def test_transaction_and_block_encoding_round_trip(crypto):
    net = three_block_chain(crypto)
    for block in net.blocks:
        assert Block.decode(block.encode()) == block
        for tx in block.txs:
            assert LedgerTransaction.decode(tx.encode()) == tx


# properties


_OPS = st.lists(
    st.tuples(st.sampled_from(["register", "revoke", "upsert", "re-register"]), st.integers(0, 5), st.integers(0, 3)),
    min_size=1,
    max_size=25,
)


def _random_history(ops) -> tuple[Net, list[LedgerState]]:
    """Drive a ledger with arbitrary (often invalid) operations; keep every state reached."""
    net = Net.create(DeterministicProvider(3))
    states = [net.state]
    for op, who, rsu in ops:
        label = f"veh{who}"
        key = net.key(label)
        addr = derive_address(net.crypto, key.public)
        if op in ("register", "re-register"):
            tx = make_registration(net.crypto, key, Role.VEHICLE, sponsor_key=net.rsu_keys[rsu])
        elif op == "revoke":
            tx = make_revocation(net.crypto, net.rsu_keys[rsu], addr)
        else:
            stored = net.state.dbnr.get(addr)
            tx = make_upsert(net.crypto, key, "v2x0", Locator(Layer.PRIMARY, f"rsu{rsu}"), stored.version if stored else 0, 900)
        try:
            net.commit([tx], proposer=rsu)
        except InvalidTxInBlock:
            pass
        states.append(net.state)
    return net, states


@given(_OPS)
def test_replay_is_deterministic(ops):
    net, _ = _random_history(ops)
    first = validate_chain(net.blocks, net.crypto)
    second = validate_chain([b.encode() for b in net.blocks], net.crypto)
    assert first.ok and second.ok
    assert first.state.encode() == second.state.encode() == net.state.encode()


@given(_OPS)
def test_active_records_are_bound_to_their_keys(ops):
    net, states = _random_history(ops)
    for state in states:
        for addr, rec in state.identities.items():
            assert rec.address == addr
            if rec.status is Status.ACTIVE:
                assert derive_address(net.crypto, rec.verify_key) == addr


@given(_OPS)
def test_revoked_records_never_return(ops):
    _, states = _random_history(ops)
    revoked: set[bytes] = set()
    for state in states:
        for addr in revoked:
            assert state.identities[addr].status is Status.REVOKED
        revoked |= {a for a, r in state.identities.items() if r.status is Status.REVOKED}


@given(_OPS)
def test_rejected_transactions_leave_state_unchanged(ops):
    net, _ = _random_history(ops)
    before = net.state.encode()
    dup = make_registration(net.crypto, net.rsu_keys[0], Role.RSU)
    with pytest.raises(DuplicateIdentity):
        apply_all(net.state, [dup], net.crypto)
    assert net.state.encode() == before
