"""Per-vehicle sub-layer: components, internal bus and the isolating gateway.

The gateway is the vehicle's only primary-layer endpoint.  Anything that
arrives through it is tagged ``EXTERNAL`` and may reach only non-sensitive
components; sensitive components are never exported and never addressable.

Gateway payloads are wrapped in a small envelope naming the target
component::

    bytes component_id | bytes payload
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

from . import bisa
from .crypto import CryptoProvider, SigningKey
from .dbnr import RevokedIdentity, make_upsert
from .encoding import DecodeError, Reader, Writer, decode_all
from .ledger import Address, Layer, LedgerState, LedgerTransaction, Locator, Role, derive_address, make_registration

GATEWAY = "gateway"


class ComponentKind(IntEnum):
    SENSOR = 1
    CONTROL_UNIT = 2
    GATEWAY = 3


class Sensitivity(IntEnum):
    SENSITIVE = 1
    NON_SENSITIVE = 2


class Origin(IntEnum):
    INTERNAL = 1
    EXTERNAL = 2


class BusError(Exception):
    @property
    def reason(self) -> str:
        return type(self).__name__


class UnknownComponent(BusError):
    pass


class Blocked(BusError):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.block_reason = reason

    @property
    def reason(self) -> str:
        return self.block_reason


class SensitiveExportRefused(BusError):
    pass


class DuplicateExport(BusError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class ComponentDescriptor:
    component_id: str
    kind: ComponentKind
    sensitivity: Sensitivity
    address: Optional[Address] = None
    export: bool = False
    interface_id: str = "bus0"

    def __post_init__(self) -> None:
        if self.sensitivity is Sensitivity.SENSITIVE and (self.address is not None or self.export):
            raise ManifestError(f"sensitive component {self.component_id!r} cannot be exported")


@dataclass(frozen=True)
class InternalMessage:
    src: str
    dst: str
    origin: Origin
    payload: bytes
    peer: Optional[Address] = None
    session_id: Optional[bytes] = None


@dataclass(frozen=True)
class DecisionInput:
    """A candidate input to a driving decision.

    ``session_id`` is set only by :func:`gateway_ingress`; anything that did
    not come out of an opened session record carries ``None``.
    """

    source: Optional[Address]
    payload: bytes
    session_id: Optional[bytes] = None


def encode_envelope(component_id: str, payload: bytes) -> bytes:
    return Writer().str(component_id).bytes(payload).getvalue()


def decode_envelope(data: bytes) -> tuple[str, bytes]:
    return decode_all(data, lambda r: (r.str(), r.bytes()))


@dataclass
class VehicleBus:
    vehicle_id: str
    components: dict[str, ComponentDescriptor]
    sessions: dict[bytes, bisa.SessionContext] = field(default_factory=dict)
    delivered: list[InternalMessage] = field(default_factory=list)
    blocked: Counter = field(default_factory=Counter)
    filtered: Counter = field(default_factory=Counter)
    external_to_sensitive: int = 0
    external_to_nonsensitive: int = 0

    def __post_init__(self) -> None:
        gateways = [c for c in self.components.values() if c.kind is ComponentKind.GATEWAY]
        if len(gateways) != 1 or gateways[0].component_id != GATEWAY:
            raise ManifestError(f"vehicle {self.vehicle_id!r} needs exactly one gateway named {GATEWAY!r}")

    @classmethod
    def from_components(cls, vehicle_id: str, components: Iterable[ComponentDescriptor]) -> "VehicleBus":
        table: dict[str, ComponentDescriptor] = {}
        for c in components:
            if c.component_id in table:
                raise ManifestError(f"duplicate component {c.component_id!r} in {vehicle_id!r}")
            table[c.component_id] = c
        if GATEWAY not in table:
            table[GATEWAY] = ComponentDescriptor(GATEWAY, ComponentKind.GATEWAY, Sensitivity.NON_SENSITIVE)
        return cls(vehicle_id, table)

    def node_id(self, component_id: str) -> str:
        return f"{self.vehicle_id}.{component_id}"

    def add_session(self, session: bisa.SessionContext) -> None:
        self.sessions[session.session_id] = session

    def exported(self) -> list[ComponentDescriptor]:
        return [c for c in self.components.values() if c.address is not None]


def route_internal(bus: VehicleBus, msg: InternalMessage) -> InternalMessage:
    """Deliver ``msg`` on the bus or raise :class:`Blocked` / :class:`UnknownComponent`."""
    dst = bus.components.get(msg.dst)
    if dst is None:
        bus.blocked["UnknownComponent"] += 1
        raise UnknownComponent(msg.dst)
    if msg.origin is Origin.EXTERNAL:
        if msg.src != GATEWAY:
            bus.blocked["ExternalBypassedGateway"] += 1
            raise Blocked("ExternalBypassedGateway", msg.src)
        if dst.sensitivity is Sensitivity.SENSITIVE:
            bus.blocked["SensitiveTarget"] += 1
            raise Blocked("SensitiveTarget", msg.dst)
    elif msg.src not in bus.components:
        bus.blocked["UnknownComponent"] += 1
        raise UnknownComponent(msg.src)
    bus.delivered.append(msg)
    if msg.origin is Origin.EXTERNAL:
        # Counted from what actually got delivered, not from the policy.
        if dst.sensitivity is Sensitivity.SENSITIVE:
            bus.external_to_sensitive += 1
        else:
            bus.external_to_nonsensitive += 1
    return msg


def export_component(
    bus: VehicleBus,
    crypto: CryptoProvider,
    vehicle_key: SigningKey,
    component_id: str,
    ledger: LedgerState,
    *,
    expires_at: int,
    component_key: Optional[SigningKey] = None,
) -> tuple[LedgerTransaction, LedgerTransaction]:
    """Give a non-sensitive component its own identity and a sub-layer DBNR record.

    Returns the ``(RegisterIdentity, UpsertDbnrRecord)`` pair; the caller
    submits both in one client request.  The component's address is recorded
    on the descriptor immediately.
    """
    comp = bus.components.get(component_id)
    if comp is None:
        raise UnknownComponent(component_id)
    if comp.sensitivity is Sensitivity.SENSITIVE:
        raise SensitiveExportRefused(component_id)
    if comp.kind is ComponentKind.GATEWAY:
        raise SensitiveExportRefused("the gateway is the vehicle's own endpoint")
    if comp.address is not None:
        raise DuplicateExport(component_id)
    vehicle_addr = derive_address(crypto, vehicle_key.public)
    if not ledger.is_active(vehicle_addr):
        raise RevokedIdentity(vehicle_addr.hex())
    key = component_key or crypto.signing_key(bus.node_id(component_id))
    register = make_registration(crypto, key, Role.VEHICLE_COMPONENT, sponsor_key=vehicle_key)
    locator = Locator(Layer.SUB_LAYER, bus.vehicle_id)
    upsert = make_upsert(crypto, key, comp.interface_id, locator, 0, expires_at)
    comp.address = derive_address(crypto, key.public)
    return register, upsert


def gateway_ingress(bus: VehicleBus, session: bisa.SessionContext, record: bytes) -> InternalMessage:
    """Open a sealed record at the gateway and route it as an External message.

    :class:`bisa.AuthFail` and :class:`bisa.ReplayDetected` propagate before
    anything touches the bus; :class:`Blocked` propagates from routing.
    """
    if not session.established or session.session_id not in bus.sessions:
        raise bisa.SessionNotEstablished()
    plaintext = bisa.open_record(session, record)
    try:
        dst, payload = decode_envelope(plaintext)
    except DecodeError as exc:
        bus.blocked["MalformedEnvelope"] += 1
        raise Blocked("MalformedEnvelope", str(exc)) from exc
    msg = InternalMessage(GATEWAY, dst, Origin.EXTERNAL, payload, session.peer_addr, session.session_id)
    return route_internal(bus, msg)


def decision_filter(bus: VehicleBus, candidates: Sequence[DecisionInput], ledger_view: LedgerState) -> list[DecisionInput]:
    """Keep inputs that came through an established session from an Active peer."""
    accepted = []
    for c in candidates:
        if c.source is None or c.session_id is None:
            bus.filtered["NoSession"] += 1
            continue
        session = bus.sessions.get(c.session_id)
        if session is None or not session.established or session.peer_addr != c.source:
            bus.filtered["NoSession"] += 1
            continue
        if not ledger_view.is_active(c.source):
            bus.filtered["InactiveSource"] += 1
            continue
        accepted.append(c)
    return accepted


def input_from(msg: InternalMessage) -> DecisionInput:
    return DecisionInput(msg.peer, msg.payload, msg.session_id)
