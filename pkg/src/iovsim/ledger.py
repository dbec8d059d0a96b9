"""Append-only identity ledger: the state machine replicated by PBFT.

The ledger stores identity registrations, revocations and DBNR records.
State transitions are pure functions: ``apply_transaction`` and
``append_block`` return a new :class:`LedgerState` or raise a
:class:`LedgerError` subclass and leave the input untouched.

Byte layouts (all via :mod:`iovsim.encoding`)::

    LedgerTransaction = u8 kind | bytes payload | bytes submitter(20) | bytes signature
    Block             = u64 height | bytes parent_hash(32) | seq<LedgerTransaction>
                        | bytes proposer(20) | bytes proposer_sig | u64 logical_time
    Registration      = bytes address | bytes verify_key | u8 role | bytes sponsor | bytes sponsor_sig
    Revocation        = bytes target
    DbnrRecord        = bytes address | str interface_id | u8 layer | str attachment
                        | u64 version | u64 expires_at | bytes owner_sig
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence, Union

from .crypto import CryptoProvider, MalformedKey, SigningKey
from .encoding import DecodeError, Reader, Writer, decode_all

ADDRESS_SIZE = 20
HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)
ZERO_ADDRESS = bytes(ADDRESS_SIZE)

Address = bytes


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def short(address: bytes) -> str:
    return address.hex()[:10]


class Role(IntEnum):
    VEHICLE = 1
    RSU = 2
    EDGE_SERVER = 3
    CLOUD_SERVER = 4
    VEHICLE_COMPONENT = 5
    PEDESTRIAN = 6


INFRASTRUCTURE = frozenset({Role.RSU, Role.EDGE_SERVER})


class Status(IntEnum):
    ACTIVE = 1
    REVOKED = 2


class TxKind(IntEnum):
    REGISTER_IDENTITY = 1
    REVOKE_IDENTITY = 2
    UPSERT_DBNR_RECORD = 3


class Layer(IntEnum):
    PRIMARY = 1
    SUB_LAYER = 2


# errors


class LedgerError(Exception):
    @property
    def reason(self) -> str:
        return type(self).__name__


class DuplicateIdentity(LedgerError):
    pass


class UnknownSubmitter(LedgerError):
    pass


class UnknownTarget(LedgerError):
    pass


class BadSignature(LedgerError):
    pass


class StaleVersion(LedgerError):
    pass


class RevokedSubmitter(LedgerError):
    pass


class AddressMismatch(LedgerError):
    pass


class UnsponsoredRegistration(LedgerError):
    """Registration lacks a valid endorsement from an entity allowed to admit it."""


class Unauthorized(LedgerError):
    pass


class InvalidKey(LedgerError):
    pass


class BadHeight(LedgerError):
    pass


class BadParentHash(LedgerError):
    pass


class BadProposerSig(LedgerError):
    pass


class BadTimestamp(LedgerError):
    pass


class BadGenesis(LedgerError):
    pass


class InvalidTxInBlock(LedgerError):
    def __init__(self, index: int, cause: str) -> None:
        super().__init__(f"tx {index}: {cause}")
        self.index = index
        self.cause = cause


# records


@dataclass(frozen=True)
class IdentityRecord:
    address: Address
    verify_key: bytes
    role: Role
    status: Status
    registered_at: int
    sponsor: Address = b""


@dataclass(frozen=True)
class Registration:
    address: Address
    verify_key: bytes
    role: Role
    sponsor: Address = b""
    sponsor_sig: bytes = b""

    def write(self, w: Writer) -> None:
        w.bytes(self.address).bytes(self.verify_key).u8(self.role).bytes(self.sponsor).bytes(self.sponsor_sig)

    @classmethod
    def read(cls, r: Reader) -> "Registration":
        address = r.bytes(ADDRESS_SIZE)
        verify_key = r.bytes()
        role = r.enum(Role)
        sponsor = r.bytes()
        if sponsor and len(sponsor) != ADDRESS_SIZE:
            raise DecodeError("sponsor must be empty or an address")
        return cls(address, verify_key, role, sponsor, r.bytes())

    def endorsement_bytes(self) -> bytes:
        return endorsement_bytes(self.address, self.verify_key, self.role)


def endorsement_bytes(address: Address, verify_key: bytes, role: Role) -> bytes:
    return b"iovsim/endorse\x00" + Writer().bytes(address).bytes(verify_key).u8(role).getvalue()


@dataclass(frozen=True)
class Revocation:
    target: Address

    def write(self, w: Writer) -> None:
        w.bytes(self.target)

    @classmethod
    def read(cls, r: Reader) -> "Revocation":
        return cls(r.bytes(ADDRESS_SIZE))


@dataclass(frozen=True)
class Locator:
    layer: Layer
    attachment: str


@dataclass(frozen=True)
class DbnrRecord:
    address: Address
    interface_id: str
    locator: Locator
    version: int
    expires_at: int
    owner_sig: bytes = b""

    def _write_body(self, w: Writer) -> Writer:
        return (
            w.bytes(self.address)
            .str(self.interface_id)
            .u8(self.locator.layer)
            .str(self.locator.attachment)
            .u64(self.version)
            .u64(self.expires_at)
        )

    def write(self, w: Writer) -> None:
        self._write_body(w).bytes(self.owner_sig)

    @classmethod
    def read(cls, r: Reader) -> "DbnrRecord":
        address = r.bytes(ADDRESS_SIZE)
        interface_id = r.str()
        layer = r.enum(Layer)
        attachment = r.str()
        return cls(address, interface_id, Locator(layer, attachment), r.u64(), r.u64(), r.bytes())

    def signing_bytes(self) -> bytes:
        return b"iovsim/dbnr\x00" + self._write_body(Writer()).getvalue()

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "DbnrRecord":
        return decode_all(data, cls.read)


Payload = Union[Registration, Revocation, DbnrRecord]
_PAYLOAD_TYPES = {
    TxKind.REGISTER_IDENTITY: Registration,
    TxKind.REVOKE_IDENTITY: Revocation,
    TxKind.UPSERT_DBNR_RECORD: DbnrRecord,
}


@dataclass(frozen=True)
class LedgerTransaction:
    kind: TxKind
    payload: Payload
    submitter: Address
    signature: bytes = b""

    def payload_bytes(self) -> bytes:
        w = Writer()
        self.payload.write(w)
        return w.getvalue()

    def signing_bytes(self) -> bytes:
        return (
            b"iovsim/tx\x00"
            + Writer().u8(self.kind).bytes(self.payload_bytes()).bytes(self.submitter).getvalue()
        )

    def write(self, w: Writer) -> None:
        w.u8(self.kind).bytes(self.payload_bytes()).bytes(self.submitter).bytes(self.signature)

    @classmethod
    def read(cls, r: Reader) -> "LedgerTransaction":
        kind = r.enum(TxKind)
        payload = decode_all(r.bytes(), _PAYLOAD_TYPES[kind].read)
        return cls(kind, payload, r.bytes(ADDRESS_SIZE), r.bytes())

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "LedgerTransaction":
        return decode_all(data, cls.read)


@dataclass(frozen=True)
class Block:
    height: int
    parent_hash: bytes
    txs: tuple[LedgerTransaction, ...]
    proposer: Address
    proposer_sig: bytes
    logical_time: int

    def write(self, w: Writer) -> None:
        w.u64(self.height).bytes(self.parent_hash)
        w.seq(self.txs, lambda w_, tx: tx.write(w_))
        w.bytes(self.proposer).bytes(self.proposer_sig).u64(self.logical_time)

    @classmethod
    def read(cls, r: Reader) -> "Block":
        height = r.u64()
        parent_hash = r.bytes(HASH_SIZE)
        txs = tuple(r.seq(LedgerTransaction.read))
        return cls(height, parent_hash, txs, r.bytes(ADDRESS_SIZE), r.bytes(), r.u64())

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        return decode_all(data, cls.read)

    def signing_bytes(self) -> bytes:
        return b"iovsim/block\x00" + replace(self, proposer_sig=b"").encode()

    @property
    def hash(self) -> bytes:
        return digest(self.encode())


@dataclass(frozen=True)
class LedgerState:
    identities: Mapping[Address, IdentityRecord]
    dbnr: Mapping[Address, DbnrRecord]
    head: Block
    head_hash: bytes = field(default=ZERO_HASH)

    @property
    def height(self) -> int:
        return self.head.height

    def identity(self, address: Address) -> Optional[IdentityRecord]:
        return self.identities.get(address)

    def is_active(self, address: Address) -> bool:
        rec = self.identities.get(address)
        return rec is not None and rec.status is Status.ACTIVE

    def encode(self) -> bytes:
        """Canonical encoding; byte-equal across replicas that replayed the same chain."""
        w = Writer().u64(self.height).bytes(self.head_hash)

        def write_identity(w_: Writer, rec: IdentityRecord) -> None:
            w_.bytes(rec.address).bytes(rec.verify_key).u8(rec.role).u8(rec.status)
            w_.u64(rec.registered_at).bytes(rec.sponsor)

        w.seq((self.identities[a] for a in sorted(self.identities)), write_identity)
        w.seq((self.dbnr[a] for a in sorted(self.dbnr)), lambda w_, rec: rec.write(w_))
        return w.getvalue()

    def digest(self) -> bytes:
        return digest(self.encode())


# operations


def derive_address(crypto: CryptoProvider, verify_key: bytes) -> Address:
    crypto.check_public_key(verify_key)
    return crypto.hash(bytes(verify_key))[:ADDRESS_SIZE]


def _require_key(state: LedgerState, address: Address) -> IdentityRecord:
    rec = state.identities.get(address)
    if rec is None:
        raise UnknownSubmitter(short(address))
    if rec.status is not Status.ACTIVE:
        raise RevokedSubmitter(short(address))
    return rec


def _sponsor_allowed(role: Role, sponsor_role: Role) -> bool:
    if role is Role.VEHICLE_COMPONENT:
        return sponsor_role is Role.VEHICLE
    return sponsor_role in INFRASTRUCTURE


def apply_transaction(
    state: LedgerState,
    tx: LedgerTransaction,
    crypto: CryptoProvider,
    *,
    logical_time: int = 0,
    bootstrap: bool = False,
    open_registration: bool = False,
) -> LedgerState:
    """Apply one transaction; raise a :class:`LedgerError` to reject it.

    ``bootstrap`` is used only while replaying genesis: registrations there
    are self-signed validator identities with no sponsor.  With
    ``open_registration`` vehicles may register without an endorsement.
    """
    if tx.kind is TxKind.REGISTER_IDENTITY:
        reg = tx.payload
        assert isinstance(reg, Registration)
        try:
            address = derive_address(crypto, reg.verify_key)
        except MalformedKey as exc:
            raise InvalidKey(str(exc)) from exc
        if address != reg.address or tx.submitter != reg.address:
            raise AddressMismatch(short(reg.address))
        if not crypto.verify(reg.verify_key, tx.signing_bytes(), tx.signature):
            raise BadSignature("registration self-signature")
        if address in state.identities:
            raise DuplicateIdentity(short(address))
        if bootstrap:
            if reg.sponsor or reg.sponsor_sig:
                raise BadGenesis("genesis identities carry no sponsor")
        elif reg.sponsor:
            sponsor = state.identities.get(reg.sponsor)
            if sponsor is None or sponsor.status is not Status.ACTIVE:
                raise UnsponsoredRegistration("sponsor unknown or revoked")
            if not _sponsor_allowed(reg.role, sponsor.role):
                raise UnsponsoredRegistration(f"{sponsor.role.name} cannot admit {reg.role.name}")
            if not crypto.verify(sponsor.verify_key, reg.endorsement_bytes(), reg.sponsor_sig):
                raise BadSignature("sponsor endorsement")
        elif not open_registration or reg.role is Role.VEHICLE_COMPONENT:
            raise UnsponsoredRegistration("no sponsor")
        rec = IdentityRecord(address, bytes(reg.verify_key), reg.role, Status.ACTIVE, logical_time, reg.sponsor)
        identities = dict(state.identities)
        identities[address] = rec
        return replace(state, identities=MappingProxyType(identities))

    submitter = _require_key(state, tx.submitter)
    if not crypto.verify(submitter.verify_key, tx.signing_bytes(), tx.signature):
        raise BadSignature("transaction signature")

    if tx.kind is TxKind.REVOKE_IDENTITY:
        rev = tx.payload
        assert isinstance(rev, Revocation)
        target = state.identities.get(rev.target)
        if target is None or target.status is Status.REVOKED:
            raise UnknownTarget(short(rev.target))
        permitted = (
            rev.target == tx.submitter
            or submitter.role in INFRASTRUCTURE
            or target.sponsor == tx.submitter
        )
        if not permitted:
            raise Unauthorized("revocation")
        identities = dict(state.identities)
        identities[rev.target] = replace(target, status=Status.REVOKED)
        return replace(state, identities=MappingProxyType(identities))

    rec = tx.payload
    assert isinstance(rec, DbnrRecord)
    if rec.address != tx.submitter:
        raise Unauthorized("records are upserted by their owner")
    if not crypto.verify(submitter.verify_key, rec.signing_bytes(), rec.owner_sig):
        raise BadSignature("record owner signature")
    stored = state.dbnr.get(rec.address)
    if rec.version < 1 or (stored is not None and rec.version <= stored.version):
        raise StaleVersion(f"version {rec.version} <= {stored.version if stored else 0}")
    dbnr = dict(state.dbnr)
    dbnr[rec.address] = rec
    return replace(state, dbnr=MappingProxyType(dbnr))


def apply_all(
    state: LedgerState,
    txs: Iterable[LedgerTransaction],
    crypto: CryptoProvider,
    **kwargs,
) -> LedgerState:
    for tx in txs:
        state = apply_transaction(state, tx, crypto, **kwargs)
    return state


def append_block(
    state: LedgerState, block: Block, crypto: CryptoProvider, *, open_registration: bool = False
) -> LedgerState:
    if block.height != state.height + 1:
        raise BadHeight(f"expected {state.height + 1}, got {block.height}")
    if block.parent_hash != state.head_hash:
        raise BadParentHash(f"at height {block.height}")
    proposer = state.identities.get(block.proposer)
    if (
        proposer is None
        or proposer.status is not Status.ACTIVE
        or proposer.role not in INFRASTRUCTURE
        or not crypto.verify(proposer.verify_key, block.signing_bytes(), block.proposer_sig)
    ):
        raise BadProposerSig(f"at height {block.height}")
    if block.logical_time < state.head.logical_time:
        raise BadTimestamp(f"at height {block.height}")
    if not block.txs:
        raise InvalidTxInBlock(0, "EmptyBlock")
    new = state
    for i, tx in enumerate(block.txs):
        try:
            new = apply_transaction(
                new, tx, crypto, logical_time=block.logical_time, open_registration=open_registration
            )
        except LedgerError as exc:
            raise InvalidTxInBlock(i, exc.reason) from exc
    return replace(new, head=block, head_hash=block.hash)


# genesis


def sign_transaction(crypto: CryptoProvider, tx: LedgerTransaction, key: SigningKey) -> LedgerTransaction:
    return replace(tx, signature=crypto.sign(key, tx.signing_bytes()))


def make_registration(
    crypto: CryptoProvider,
    key: SigningKey,
    role: Role,
    sponsor_key: Optional[SigningKey] = None,
) -> LedgerTransaction:
    """Self-signed RegisterIdentity, optionally endorsed by ``sponsor_key``."""
    address = derive_address(crypto, key.public)
    sponsor = sponsor_sig = b""
    if sponsor_key is not None:
        sponsor = derive_address(crypto, sponsor_key.public)
        sponsor_sig = crypto.sign(sponsor_key, endorsement_bytes(address, key.public, role))
    reg = Registration(address, key.public, role, sponsor, sponsor_sig)
    return sign_transaction(crypto, LedgerTransaction(TxKind.REGISTER_IDENTITY, reg, address), key)


def make_revocation(crypto: CryptoProvider, key: SigningKey, target: Address) -> LedgerTransaction:
    tx = LedgerTransaction(TxKind.REVOKE_IDENTITY, Revocation(target), derive_address(crypto, key.public))
    return sign_transaction(crypto, tx, key)


def make_genesis(crypto: CryptoProvider, members: Sequence[tuple[SigningKey, Role]]) -> Block:
    txs = tuple(make_registration(crypto, key, role) for key, role in members)
    return Block(0, ZERO_HASH, txs, ZERO_ADDRESS, b"", 0)


def genesis_state(block: Block, crypto: CryptoProvider) -> LedgerState:
    if (
        block.height != 0
        or block.parent_hash != ZERO_HASH
        or block.proposer != ZERO_ADDRESS
        or block.proposer_sig
        or block.logical_time != 0
    ):
        raise BadGenesis("genesis header fields must be zero")
    state = LedgerState(MappingProxyType({}), MappingProxyType({}), block, ZERO_HASH)
    for i, tx in enumerate(block.txs):
        if tx.kind is not TxKind.REGISTER_IDENTITY or tx.payload.role not in (*INFRASTRUCTURE, Role.CLOUD_SERVER):
            raise InvalidTxInBlock(i, "BadGenesis")
        try:
            state = apply_transaction(state, tx, crypto, bootstrap=True)
        except LedgerError as exc:
            raise InvalidTxInBlock(i, exc.reason) from exc
    return replace(state, head_hash=block.hash)


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    state: Optional[LedgerState]
    failed_index: Optional[int] = None
    reason: Optional[str] = None


def validate_chain(
    blocks: Sequence[Union[Block, bytes]], crypto: CryptoProvider, *, open_registration: bool = False
) -> ChainReport:
    """Replay ``blocks`` from genesis.

    Blocks may be given decoded or as canonical bytes; a decode failure is
    reported like any other invalid block.  Returns the final state, or the
    index and reason of the first failing block together with the last good
    state.
    """
    state: Optional[LedgerState] = None
    if not blocks:
        return ChainReport(False, None, 0, "EmptyChain")
    for i, item in enumerate(blocks):
        try:
            block = Block.decode(item) if isinstance(item, (bytes, bytearray)) else item
            if i == 0:
                state = genesis_state(block, crypto)
            else:
                assert state is not None
                state = append_block(state, block, crypto, open_registration=open_registration)
        except DecodeError as exc:
            return ChainReport(False, state, i, f"DecodeError: {exc}")
        except InvalidTxInBlock as exc:
            return ChainReport(False, state, i, exc.cause)
        except LedgerError as exc:
            return ChainReport(False, state, i, exc.reason)
    return ChainReport(True, state)


# files


def write_genesis_json(path: Union[str, Path], block: Block, nodes: Mapping[Address, str]) -> None:
    """Genesis as JSON: one entry per validator identity with its key and self-signature."""
    entries = []
    for tx in block.txs:
        reg = tx.payload
        entries.append(
            {
                "node": nodes.get(reg.address, ""),
                "role": reg.role.name,
                "address": reg.address.hex(),
                "verify_key": reg.verify_key.hex(),
                "signature": tx.signature.hex(),
            }
        )
    Path(path).write_text(json.dumps({"schema_version": 1, "validators": entries}, indent=2) + "\n")


def read_genesis_json(path: Union[str, Path]) -> tuple[Block, dict[Address, str]]:
    doc = json.loads(Path(path).read_text())
    txs = []
    nodes: dict[Address, str] = {}
    for entry in doc["validators"]:
        address = bytes.fromhex(entry["address"])
        reg = Registration(address, bytes.fromhex(entry["verify_key"]), Role[entry["role"]])
        txs.append(
            LedgerTransaction(TxKind.REGISTER_IDENTITY, reg, address, bytes.fromhex(entry["signature"]))
        )
        nodes[address] = entry.get("node", "")
    return Block(0, ZERO_HASH, tuple(txs), ZERO_ADDRESS, b"", 0), nodes


def dump_blocks_jsonl(path: Union[str, Path], blocks: Iterable[Block]) -> None:
    with open(path, "w") as fh:
        for block in blocks:
            line = {"height": block.height, "hash": block.hash.hex(), "block": block.encode().hex()}
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def load_blocks_jsonl(path: Union[str, Path]) -> list[bytes]:
    with open(path) as fh:
        return [bytes.fromhex(json.loads(line)["block"]) for line in fh if line.strip()]
