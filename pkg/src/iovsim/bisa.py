"""Blockchain-integrated mutual authentication and session encryption.

Three messages, no third party: each side looks the other's verify key up in
its own ledger view by blockchain address.

    Hello     I -> R   nonce_i, eph_i
    Response  R -> I   nonce_r, echo nonce_i, eph_r, sig_R(Hello | Response)
    Confirm   I -> R   nonce_i, echo nonce_r, eph_i, sig_I(Hello | Response | Confirm)

The session key is HKDF(agree(eph), salt=nonce_i|nonce_r,
info=addr_i|addr_r); per-direction keys are derived from it.  Sealed records
carry a strictly increasing counter and are bound to the session id,
counter and both addresses.

HandshakeMessage layout::

    u8 step | bytes sender_addr(20) | bytes peer_addr(20) | bytes nonce(16)
    | bytes peer_nonce(16) | bytes ephemeral_pub | bytes transcript_sig

Sealed record layout (fixed overhead ``RECORD_OVERHEAD`` = 32 bytes)::

    session_id(8) | counter u64 (8) | AEAD ciphertext | tag(16)
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Protocol

from .crypto import AgreementKey, AuthFail as _CryptoAuthFail, CryptoProvider, MalformedKey, SigningKey
from .encoding import DecodeError, Reader, Writer, decode_all
from .ledger import ADDRESS_SIZE, Address, IdentityRecord, derive_address

NONCE_SIZE = 16
SESSION_ID_SIZE = 8
HEADER_SIZE = SESSION_ID_SIZE + 8
RECORD_OVERHEAD = HEADER_SIZE + 16
_ZERO_NONCE = bytes(NONCE_SIZE)


class BisaError(Exception):
    @property
    def reason(self) -> str:
        return type(self).__name__


class UnknownIdentity(BisaError):
    pass


class RevokedLocal(BisaError):
    pass


class AddrMismatch(BisaError):
    pass


class BadTranscriptSig(BisaError):
    pass


class NonceMismatch(BisaError):
    pass


class MalformedHandshake(BisaError):
    pass


class SessionNotEstablished(BisaError):
    pass


class AuthFail(BisaError):
    pass


class ReplayDetected(BisaError):
    pass


class LedgerView(Protocol):
    def identity(self, address: Address) -> Optional[IdentityRecord]: ...

    def is_active(self, address: Address) -> bool: ...


class Step(IntEnum):
    HELLO = 1
    RESPONSE = 2
    CONFIRM = 3


@dataclass(frozen=True)
class HandshakeMessage:
    step: Step
    sender_addr: Address
    peer_addr: Address
    nonce: bytes
    peer_nonce: bytes
    ephemeral_pub: bytes
    transcript_sig: bytes = b""

    FIELDS = ("step", "sender_addr", "peer_addr", "nonce", "peer_nonce", "ephemeral_pub", "transcript_sig")

    def _write_header(self, w: Writer) -> Writer:
        return (
            w.u8(self.step)
            .bytes(self.sender_addr)
            .bytes(self.peer_addr)
            .bytes(self.nonce)
            .bytes(self.peer_nonce)
            .bytes(self.ephemeral_pub)
        )

    def header_bytes(self) -> bytes:
        return self._write_header(Writer()).getvalue()

    def encode(self) -> bytes:
        return self._write_header(Writer()).bytes(self.transcript_sig).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "HandshakeMessage":
        def read(r: Reader) -> "HandshakeMessage":
            return cls(
                r.enum(Step),
                r.bytes(ADDRESS_SIZE),
                r.bytes(ADDRESS_SIZE),
                r.bytes(NONCE_SIZE),
                r.bytes(NONCE_SIZE),
                r.bytes(),
                r.bytes(),
            )

        return decode_all(data, read)


@dataclass(frozen=True)
class LocalIdentity:
    key: SigningKey
    address: Address

    @classmethod
    def from_key(cls, crypto: CryptoProvider, key: SigningKey) -> "LocalIdentity":
        return cls(key, derive_address(crypto, key.public))


@dataclass
class PendingHandshake:
    local: LocalIdentity
    peer_addr: Address
    nonce: bytes
    ephemeral: AgreementKey
    hello: HandshakeMessage


@dataclass
class SessionContext:
    local_addr: Address
    peer_addr: Address
    session_key: bytes = field(repr=False)
    session_id: bytes
    initiator: bool
    established_at: int
    send_counter: int = 0
    recv_counter: int = 0
    established: bool = False
    crypto: Optional[CryptoProvider] = field(default=None, repr=False, compare=False)
    # Responder-side state kept until the Confirm is verified.
    _transcript: bytes = field(default=b"", repr=False)
    _nonces: tuple[bytes, bytes] = field(default=(b"", b""), repr=False)
    _peer_eph: bytes = field(default=b"", repr=False)

    @property
    def key_fingerprint(self) -> str:
        assert self.crypto is not None
        return self.crypto.hash(self.session_key)[:8].hex()

    def _direction_key(self, sending: bool) -> bytes:
        assert self.crypto is not None
        outbound = self.initiator == sending
        return self.crypto.kdf(self.session_key, b"", b"iovsim/bisa/i2r" if outbound else b"iovsim/bisa/r2i")


def _response_transcript(hello: HandshakeMessage, response: HandshakeMessage) -> bytes:
    return b"iovsim/bisa/response\x00" + hello.header_bytes() + response.header_bytes()


def _confirm_transcript(hello: HandshakeMessage, response: HandshakeMessage, confirm: HandshakeMessage) -> bytes:
    return b"iovsim/bisa/confirm\x00" + hello.header_bytes() + response.encode() + confirm.header_bytes()


def _derive_session(
    crypto: CryptoProvider,
    shared: bytes,
    nonce_i: bytes,
    nonce_r: bytes,
    addr_i: Address,
    addr_r: Address,
    transcript: bytes,
) -> tuple[bytes, bytes]:
    key = crypto.kdf(shared, nonce_i + nonce_r, b"iovsim/bisa/session" + addr_i + addr_r)
    return key, crypto.hash(transcript)[:SESSION_ID_SIZE]


def _peer_key(ledger: LedgerView, address: Address) -> bytes:
    if not ledger.is_active(address):
        raise UnknownIdentity(address.hex())
    rec = ledger.identity(address)
    assert rec is not None
    return rec.verify_key


def initiate(
    crypto: CryptoProvider,
    local: LocalIdentity,
    peer_addr: Address,
    ledger: LedgerView,
    rng: random.Random,
) -> tuple[PendingHandshake, HandshakeMessage]:
    if not ledger.is_active(local.address):
        raise RevokedLocal(local.address.hex())
    _peer_key(ledger, peer_addr)
    nonce = rng.randbytes(NONCE_SIZE)
    eph = crypto.agreement_key(f"{local.key.label}/eph")
    hello = HandshakeMessage(Step.HELLO, local.address, peer_addr, nonce, _ZERO_NONCE, eph.public)
    return PendingHandshake(local, peer_addr, nonce, eph, hello), hello


def respond(
    crypto: CryptoProvider,
    local: LocalIdentity,
    hello: HandshakeMessage,
    ledger: LedgerView,
    rng: random.Random,
    now: int = 0,
) -> tuple[SessionContext, HandshakeMessage]:
    if hello.step is not Step.HELLO or hello.peer_nonce != _ZERO_NONCE or hello.transcript_sig:
        raise MalformedHandshake("not a Hello")
    if hello.peer_addr != local.address:
        raise AddrMismatch(hello.peer_addr.hex())
    if not ledger.is_active(local.address):
        raise RevokedLocal(local.address.hex())
    _peer_key(ledger, hello.sender_addr)
    nonce = rng.randbytes(NONCE_SIZE)
    eph = crypto.agreement_key(f"{local.key.label}/eph")
    try:
        shared = crypto.agree(eph, hello.ephemeral_pub)
    except MalformedKey as exc:
        raise MalformedHandshake(str(exc)) from exc
    unsigned = HandshakeMessage(Step.RESPONSE, local.address, hello.sender_addr, nonce, hello.nonce, eph.public)
    transcript = _response_transcript(hello, unsigned)
    response = replace(unsigned, transcript_sig=crypto.sign(local.key, transcript))
    key, sid = _derive_session(crypto, shared, hello.nonce, nonce, hello.sender_addr, local.address, transcript)
    session = SessionContext(
        local.address,
        hello.sender_addr,
        key,
        sid,
        initiator=False,
        established_at=now,
        crypto=crypto,
        _transcript=hello.header_bytes() + response.encode(),
        _nonces=(hello.nonce, nonce),
        _peer_eph=hello.ephemeral_pub,
    )
    return session, response


def complete(
    crypto: CryptoProvider,
    pending: PendingHandshake,
    response: HandshakeMessage,
    ledger: LedgerView,
    now: int = 0,
) -> tuple[SessionContext, HandshakeMessage]:
    if response.step is not Step.RESPONSE:
        raise MalformedHandshake("not a Response")
    if response.sender_addr != pending.peer_addr or response.peer_addr != pending.local.address:
        raise AddrMismatch(response.sender_addr.hex())
    if response.peer_nonce != pending.nonce:
        raise NonceMismatch("response does not echo our nonce")
    peer_key = _peer_key(ledger, response.sender_addr)
    unsigned = replace(response, transcript_sig=b"")
    transcript = _response_transcript(pending.hello, unsigned)
    if not crypto.verify(peer_key, transcript, response.transcript_sig):
        raise BadTranscriptSig("responder signature")
    try:
        shared = crypto.agree(pending.ephemeral, response.ephemeral_pub)
    except MalformedKey as exc:
        raise BadTranscriptSig(str(exc)) from exc
    local = pending.local
    key, sid = _derive_session(
        crypto, shared, pending.nonce, response.nonce, local.address, response.sender_addr, transcript
    )
    confirm = HandshakeMessage(
        Step.CONFIRM, local.address, response.sender_addr, pending.nonce, response.nonce, pending.ephemeral.public
    )
    confirm = replace(
        confirm, transcript_sig=crypto.sign(local.key, _confirm_transcript(pending.hello, response, confirm))
    )
    session = SessionContext(
        local.address, response.sender_addr, key, sid, initiator=True, established_at=now, established=True, crypto=crypto
    )
    return session, confirm


def accept_confirm(
    crypto: CryptoProvider, session: SessionContext, confirm: HandshakeMessage, ledger: LedgerView, now: int = 0
) -> SessionContext:
    """Responder's final step: verify the initiator's transcript signature."""
    if confirm.step is not Step.CONFIRM or session.established or session.initiator:
        raise MalformedHandshake("unexpected Confirm")
    if confirm.sender_addr != session.peer_addr or confirm.peer_addr != session.local_addr:
        raise AddrMismatch(confirm.sender_addr.hex())
    nonce_i, nonce_r = session._nonces
    if confirm.nonce != nonce_i or confirm.peer_nonce != nonce_r:
        raise NonceMismatch("confirm nonces")
    if confirm.ephemeral_pub != session._peer_eph:
        raise BadTranscriptSig("ephemeral value changed")
    peer_key = _peer_key(ledger, confirm.sender_addr)
    transcript = b"iovsim/bisa/confirm\x00" + session._transcript + replace(confirm, transcript_sig=b"").header_bytes()
    if not crypto.verify(peer_key, transcript, confirm.transcript_sig):
        raise BadTranscriptSig("initiator signature")
    session.established = True
    session.established_at = now
    session._transcript = b""
    return session


def _nonce(initiator_sends: bool, counter: int) -> bytes:
    return (b"i2r\x00" if initiator_sends else b"r2i\x00") + struct.pack(">Q", counter)


def seal(session: SessionContext, plaintext: bytes) -> bytes:
    if not session.established or session.crypto is None:
        raise SessionNotEstablished()
    session.send_counter += 1
    header = session.session_id + struct.pack(">Q", session.send_counter)
    aad = header + session.local_addr + session.peer_addr
    body = session.crypto.seal(
        session._direction_key(sending=True), _nonce(session.initiator, session.send_counter), plaintext, aad
    )
    return header + body


def open_record(session: SessionContext, record: bytes) -> bytes:
    if not session.established or session.crypto is None:
        raise SessionNotEstablished()
    if len(record) < RECORD_OVERHEAD or record[:SESSION_ID_SIZE] != session.session_id:
        raise AuthFail("record does not belong to this session")
    (counter,) = struct.unpack(">Q", record[SESSION_ID_SIZE:HEADER_SIZE])
    aad = record[:HEADER_SIZE] + session.peer_addr + session.local_addr
    try:
        plaintext = session.crypto.open(
            session._direction_key(sending=False), _nonce(not session.initiator, counter), record[HEADER_SIZE:], aad
        )
    except _CryptoAuthFail as exc:
        raise AuthFail(str(exc)) from exc
    if counter <= session.recv_counter:
        raise ReplayDetected(f"counter {counter} <= {session.recv_counter}")
    session.recv_counter = counter
    return plaintext


def record_session_id(record: bytes) -> bytes:
    return record[:SESSION_ID_SIZE]


__all__ = [
    "AddrMismatch",
    "AuthFail",
    "BadTranscriptSig",
    "BisaError",
    "DecodeError",
    "HandshakeMessage",
    "LocalIdentity",
    "MalformedHandshake",
    "NonceMismatch",
    "PendingHandshake",
    "RECORD_OVERHEAD",
    "ReplayDetected",
    "RevokedLocal",
    "SessionContext",
    "SessionNotEstablished",
    "Step",
    "UnknownIdentity",
    "accept_confirm",
    "complete",
    "initiate",
    "open_record",
    "record_session_id",
    "respond",
    "seal",
]
