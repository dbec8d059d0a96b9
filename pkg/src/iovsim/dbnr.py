"""Decentralized name resolution: address -> (interface, locator) records.

Records live on the ledger as ``UpsertDbnrRecord`` transactions, so they are
only as fresh as the committed chain.  RSUs and edge servers serve them from
a :class:`ResolverCache` refreshed after every executed block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import IntEnum
from types import MappingProxyType
from typing import Mapping, Optional, Protocol

from .crypto import CryptoProvider, SigningKey
from .encoding import Reader, Writer, decode_all
from .ledger import (
    ADDRESS_SIZE,
    Address,
    DbnrRecord,
    Layer,
    LedgerState,
    LedgerTransaction,
    Locator,
    TxKind,
    derive_address,
    sign_transaction,
)

DEFAULT_EXPIRY = 500

__all__ = [
    "DEFAULT_EXPIRY",
    "DbnrRecord",
    "Locator",
    "Layer",
    "NotFound",
    "Expired",
    "NoRoute",
    "RevokedIdentity",
    "ResolverCache",
    "make_upsert",
    "resolve",
    "refresh_cache",
    "resolve_route",
    "record_is_authentic",
    "DbnrQuery",
    "DbnrAnswer",
    "AnswerStatus",
]


class ResolutionError(LookupError):
    pass


class NotFound(ResolutionError):
    pass


class Expired(ResolutionError):
    def __init__(self, record: DbnrRecord) -> None:
        super().__init__(f"record v{record.version} expired at {record.expires_at}")
        self.record = record


class NoRoute(ResolutionError):
    pass


class RevokedIdentity(Exception):
    pass


def make_upsert(
    crypto: CryptoProvider,
    key: SigningKey,
    interface_id: str,
    locator: Locator,
    prev_version: int,
    expires_at: int,
    *,
    ledger: Optional[LedgerState] = None,
) -> LedgerTransaction:
    """Owner-signed record transaction with ``version = prev_version + 1``."""
    address = derive_address(crypto, key.public)
    if ledger is not None and not ledger.is_active(address):
        raise RevokedIdentity(address.hex())
    record = DbnrRecord(address, interface_id, locator, prev_version + 1, expires_at)
    record = replace(record, owner_sig=crypto.sign(key, record.signing_bytes()))
    return sign_transaction(crypto, LedgerTransaction(TxKind.UPSERT_DBNR_RECORD, record, address), key)


def record_is_authentic(record: DbnrRecord, ledger: LedgerState, crypto: CryptoProvider) -> bool:
    """Check a served record against a (possibly stale) local ledger view."""
    owner = ledger.identity(record.address)
    if owner is None or not ledger.is_active(record.address):
        return False
    return crypto.verify(owner.verify_key, record.signing_bytes(), record.owner_sig)


@dataclass(frozen=True)
class ResolverCache:
    entries: Mapping[Address, DbnrRecord]
    as_of: int = 0

    @classmethod
    def empty(cls) -> "ResolverCache":
        return cls(MappingProxyType({}), 0)

    def encode(self) -> bytes:
        w = Writer().u64(self.as_of)
        w.seq((self.entries[a] for a in sorted(self.entries)), lambda w_, rec: rec.write(w_))
        return w.getvalue()

    def to_json(self) -> str:
        rows = [
            {
                "address": rec.address.hex(),
                "interface_id": rec.interface_id,
                "layer": rec.locator.layer.name,
                "attachment": rec.locator.attachment,
                "version": rec.version,
                "expires_at": rec.expires_at,
            }
            for _, rec in sorted(self.entries.items())
        ]
        return json.dumps({"as_of": self.as_of, "records": rows}, indent=2)


def resolve(cache: ResolverCache, address: Address, now: int) -> DbnrRecord:
    record = cache.entries.get(address)
    if record is None:
        raise NotFound(address.hex())
    if now >= record.expires_at:
        raise Expired(record)
    return record


def refresh_cache(cache: ResolverCache, ledger: LedgerState) -> ResolverCache:
    if ledger.height < cache.as_of:
        raise ValueError(f"ledger height {ledger.height} behind cache as_of {cache.as_of}")
    if ledger.height == cache.as_of and cache.entries == ledger.dbnr:
        return cache
    return ResolverCache(MappingProxyType(dict(ledger.dbnr)), ledger.height)


class Topology(Protocol):
    def has_node(self, node: str) -> bool: ...

    def node_for(self, address: Address) -> Optional[str]: ...

    def attachment_of(self, node: str) -> Optional[str]: ...


def gateway_id(vehicle: str) -> str:
    return f"{vehicle}.gateway"


def resolve_route(src_node: str, src: Locator, dst: DbnrRecord, topology: Topology, now: Optional[int] = None) -> list[str]:
    """Ordered node path from ``src_node`` to the holder of ``dst``.

    Primary endpoints reach the backbone through their attachment RSU; the
    backbone is a full mesh.  Sub-layer endpoints are reached only through
    the owning vehicle's gateway.
    """
    if now is not None and now >= dst.expires_at:
        raise Expired(dst)

    def require(node: Optional[str]) -> str:
        if node is None or not topology.has_node(node):
            raise NoRoute(f"node {node!r} not in topology")
        return node

    if src.layer is Layer.PRIMARY:
        head = [src_node, require(src.attachment)]
    else:
        vehicle = require(src.attachment)
        head = [src_node, gateway_id(vehicle), require(topology.attachment_of(vehicle))]

    dst_node = require(topology.node_for(dst.address))
    if dst.locator.layer is Layer.PRIMARY:
        tail = [require(dst.locator.attachment), dst_node]
    else:
        vehicle = require(dst.locator.attachment)
        tail = [require(topology.attachment_of(vehicle)), gateway_id(vehicle), dst_node]

    path: list[str] = []
    for node in head + tail:
        if not path or path[-1] != node:
            path.append(node)
    return path


# resolver wire messages


class AnswerStatus(IntEnum):
    FOUND = 1
    NOT_FOUND = 2
    EXPIRED = 3


@dataclass(frozen=True)
class DbnrQuery:
    address: Address
    query_id: int

    def encode(self) -> bytes:
        return Writer().bytes(self.address).u64(self.query_id).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "DbnrQuery":
        return decode_all(data, lambda r: cls(r.bytes(ADDRESS_SIZE), r.u64()))


@dataclass(frozen=True)
class DbnrAnswer:
    address: Address
    query_id: int
    status: AnswerStatus
    record: Optional[DbnrRecord]
    as_of: int

    def encode(self) -> bytes:
        w = Writer().bytes(self.address).u64(self.query_id).u8(self.status)
        w.optional(self.record, lambda w_, rec: rec.write(w_))
        return w.u64(self.as_of).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "DbnrAnswer":
        def read(r: Reader) -> "DbnrAnswer":
            return cls(r.bytes(ADDRESS_SIZE), r.u64(), r.enum(AnswerStatus), r.optional(DbnrRecord.read), r.u64())

        return decode_all(data, read)


def answer_query(cache: ResolverCache, query: DbnrQuery, now: int) -> DbnrAnswer:
    try:
        record = resolve(cache, query.address, now)
        return DbnrAnswer(query.address, query.query_id, AnswerStatus.FOUND, record, cache.as_of)
    except Expired as exc:
        return DbnrAnswer(query.address, query.query_id, AnswerStatus.EXPIRED, exc.record, cache.as_of)
    except NotFound:
        return DbnrAnswer(query.address, query.query_id, AnswerStatus.NOT_FOUND, None, cache.as_of)
