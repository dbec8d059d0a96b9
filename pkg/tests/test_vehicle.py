import pytest
from hypothesis import given
from hypothesis import strategies as st

from iovsim import bisa
from iovsim.dbnr import ResolverCache, refresh_cache, resolve
from iovsim.ledger import Layer, Role
from iovsim.vehicle import (
    GATEWAY,
    Blocked,
    ComponentDescriptor,
    ComponentKind,
    DecisionInput,
    DuplicateExport,
    InternalMessage,
    ManifestError,
    Origin,
    Sensitivity,
    SensitiveExportRefused,
    UnknownComponent,
    VehicleBus,
    decision_filter,
    encode_envelope,
    export_component,
    gateway_ingress,
    input_from,
    route_internal,
)

from support import Net, run_handshake

K, S = ComponentKind, Sensitivity


def _bus(vid="veh0"):
    return VehicleBus.from_components(
        vid,
        [
            ComponentDescriptor("lidar", K.SENSOR, S.SENSITIVE),
            ComponentDescriptor("brake", K.CONTROL_UNIT, S.SENSITIVE),
            ComponentDescriptor("telemetry", K.SENSOR, S.NON_SENSITIVE),
            ComponentDescriptor("camera", K.SENSOR, S.NON_SENSITIVE),
        ],
    )


def _ext(dst, src=GATEWAY):
    return InternalMessage(src, dst, Origin.EXTERNAL, b"x")


# manifest


def test_gateway_added_once():
    bus = _bus()
    assert bus.components[GATEWAY].kind is K.GATEWAY
    with pytest.raises(ManifestError):
        VehicleBus("v", {"a": ComponentDescriptor("a", K.SENSOR, S.NON_SENSITIVE)})


def test_sensitive_cannot_carry_address():
    with pytest.raises(ManifestError):
        ComponentDescriptor("brake", K.CONTROL_UNIT, S.SENSITIVE, export=True)
    with pytest.raises(ManifestError):
        ComponentDescriptor("brake", K.CONTROL_UNIT, S.SENSITIVE, address=b"\x00" * 20)


def test_duplicate_component_ids():
    c = ComponentDescriptor("a", K.SENSOR, S.NON_SENSITIVE)
    with pytest.raises(ManifestError):
        VehicleBus.from_components("v", [c, c])


# routing


def test_internal_sensor_to_control_unit():
    bus = _bus()
    route_internal(bus, InternalMessage("lidar", "brake", Origin.INTERNAL, b"obstacle"))
    assert [m.dst for m in bus.delivered] == ["brake"]
    assert bus.external_to_sensitive == bus.external_to_nonsensitive == 0


def test_external_to_sensitive_blocked():
    bus = _bus()
    with pytest.raises(Blocked) as info:
        route_internal(bus, _ext("brake"))
    assert info.value.reason == "SensitiveTarget"
    assert bus.blocked["SensitiveTarget"] == 1
    assert bus.delivered == []


def test_external_to_nonsensitive_delivered():
    bus = _bus()
    route_internal(bus, _ext("telemetry"))
    assert bus.external_to_nonsensitive == 1


def test_external_not_through_gateway():
    bus = _bus()
    with pytest.raises(Blocked) as info:
        route_internal(bus, _ext("telemetry", src="camera"))
    assert info.value.reason == "ExternalBypassedGateway"


def test_unknown_components():
    bus = _bus()
    with pytest.raises(UnknownComponent):
        route_internal(bus, _ext("radio"))
    with pytest.raises(UnknownComponent):
        route_internal(bus, InternalMessage("radio", "brake", Origin.INTERNAL, b""))
    assert bus.blocked["UnknownComponent"] == 2


# export


@pytest.fixture
def car(net):
    net.register("veh0", "veh1")
    return net, _bus()


def test_export_nonsensitive_is_resolvable(car):
    net, bus = car
    reg, up = export_component(bus, net.crypto, net.keys["veh0"], "camera", net.state, expires_at=900)
    net.commit([reg, up])
    addr = bus.components["camera"].address
    assert net.state.identity(addr).role is Role.VEHICLE_COMPONENT
    assert net.state.identity(addr).sponsor == net.addr("veh0")
    rec = resolve(refresh_cache(ResolverCache.empty(), net.state), addr, 0)
    assert rec.locator.layer is Layer.SUB_LAYER
    assert rec.locator.attachment == "veh0"
    assert bus.exported() == [bus.components["camera"]]


def test_export_sensitive_refused(car):
    net, bus = car
    with pytest.raises(SensitiveExportRefused):
        export_component(bus, net.crypto, net.keys["veh0"], "brake", net.state, expires_at=900)
    with pytest.raises(SensitiveExportRefused):
        export_component(bus, net.crypto, net.keys["veh0"], GATEWAY, net.state, expires_at=900)
    assert bus.components["brake"].address is None


def test_export_twice(car):
    net, bus = car
    export_component(bus, net.crypto, net.keys["veh0"], "camera", net.state, expires_at=900)
    with pytest.raises(DuplicateExport):
        export_component(bus, net.crypto, net.keys["veh0"], "camera", net.state, expires_at=900)


def test_export_unknown_component(car):
    net, bus = car
    with pytest.raises(UnknownComponent):
        export_component(bus, net.crypto, net.keys["veh0"], "radio", net.state, expires_at=900)


# gateway ingress


@pytest.fixture
def link(net):
    """RSU rsu0 holds an established session with the gateway of veh0."""
    net.register("veh0")
    bus = _bus()
    hs = run_handshake(net, "rsu0", "veh0")
    bus.add_session(hs.responder)
    return net, bus, hs


def test_sealed_record_to_exported_component(link):
    net, bus, hs = link
    msg = gateway_ingress(bus, hs.responder, bisa.seal(hs.initiator, encode_envelope("telemetry", b"speed?")))
    assert (msg.src, msg.dst, msg.origin, msg.payload) == (GATEWAY, "telemetry", Origin.EXTERNAL, b"speed?")
    assert msg.peer == net.addr("rsu0")
    assert bus.external_to_nonsensitive == 1


def test_sealed_record_to_sensitive_component(link):
    net, bus, hs = link
    record = bisa.seal(hs.initiator, encode_envelope("brake", b"stop"))
    with pytest.raises(Blocked):
        gateway_ingress(bus, hs.responder, record)
    assert hs.responder.recv_counter == 1  # opened, then blocked
    assert bus.blocked["SensitiveTarget"] == 1
    assert bus.external_to_sensitive == 0


def test_tampered_record_never_enters_bus(link):
    net, bus, hs = link
    record = bisa.seal(hs.initiator, encode_envelope("telemetry", bytes(40)))
    for bit in range(len(record) * 8):
        flipped = bytearray(record)
        flipped[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(bisa.AuthFail):
            gateway_ingress(bus, hs.responder, bytes(flipped))
    assert bus.delivered == []
    gateway_ingress(bus, hs.responder, record)
    assert len(bus.delivered) == 1


def test_replayed_record_never_enters_bus(link):
    net, bus, hs = link
    record = bisa.seal(hs.initiator, encode_envelope("telemetry", b"once"))
    gateway_ingress(bus, hs.responder, record)
    with pytest.raises(bisa.ReplayDetected):
        gateway_ingress(bus, hs.responder, record)
    assert len(bus.delivered) == 1


def test_unregistered_session_refused(link):
    net, bus, hs = link
    bus.sessions.clear()
    with pytest.raises(bisa.SessionNotEstablished):
        gateway_ingress(bus, hs.responder, bisa.seal(hs.initiator, encode_envelope("telemetry", b"")))


def test_malformed_envelope(link):
    net, bus, hs = link
    with pytest.raises(Blocked) as info:
        gateway_ingress(bus, hs.responder, bisa.seal(hs.initiator, b"\xff"))
    assert info.value.reason == "MalformedEnvelope"


# decision filter


def test_session_input_from_active_rsu(link):
    net, bus, hs = link
    msg = gateway_ingress(bus, hs.responder, bisa.seal(hs.initiator, encode_envelope("telemetry", b"brake ahead")))
    assert decision_filter(bus, [input_from(msg)], net.state) == [input_from(msg)]


def test_injected_plaintext_excluded(link):
    net, bus, hs = link
    forged = [
        DecisionInput(None, b"brake now"),
        DecisionInput(net.addr("rsu0"), b"brake now"),
        DecisionInput(net.addr("rsu0"), b"brake now", session_id=b"\x00" * 8),
        DecisionInput(net.addr("rsu1"), b"brake now", session_id=hs.responder.session_id),
    ]
    assert decision_filter(bus, forged, net.state) == []
    assert bus.filtered["NoSession"] == 4


def test_revocation_flips_at_refresh(link):
    net, bus, hs = link
    msg = gateway_ingress(bus, hs.responder, bisa.seal(hs.initiator, encode_envelope("telemetry", b"go")))
    views = [net.state]
    net.revoke("rsu0", by="rsu1")
    views.append(net.state)
    verdicts = [bool(decision_filter(bus, [input_from(msg)], v)) for v in views]
    assert verdicts == [True, False]
    assert bus.filtered["InactiveSource"] == 1


# properties

_components = ["lidar", "brake", "telemetry", "camera", GATEWAY, "ghost"]


@given(
    st.lists(
        st.tuples(st.sampled_from(_components), st.sampled_from(_components), st.sampled_from(list(Origin))),
        max_size=30,
    )
)
def test_prop_isolation(msgs):
    bus = _bus()
    for src, dst, origin in msgs:
        try:
            route_internal(bus, InternalMessage(src, dst, origin, b""))
        except (Blocked, UnknownComponent):
            pass
    assert bus.external_to_sensitive == 0
    for m in bus.delivered:
        if m.origin is Origin.EXTERNAL:
            assert bus.components[m.dst].sensitivity is S.NON_SENSITIVE
            assert m.src == GATEWAY


_base = Net.create()
_base.register("veh0", "veh1")


@given(st.lists(st.tuples(st.sampled_from(["veh0", "veh1"]), st.sampled_from(_components)), max_size=8))
def test_prop_export_soundness(attempts):
    net = Net(_base.crypto, _base.rsu_keys, list(_base.blocks), _base.state, dict(_base.keys), _base.clock)
    buses = {v: _bus(v) for v in ("veh0", "veh1")}
    txs = []
    for vid, cid in attempts:
        try:
            txs += export_component(buses[vid], net.crypto, net.keys[vid], cid, net.state, expires_at=500)
        except (SensitiveExportRefused, DuplicateExport, UnknownComponent):
            pass
    if txs:
        net.commit(txs)
    for rec in net.state.dbnr.values():
        if rec.locator.layer is Layer.SUB_LAYER:
            bus = buses[rec.locator.attachment]
            owners = [c for c in bus.components.values() if c.address == rec.address]
            assert len(owners) == 1
            assert owners[0].sensitivity is S.NON_SENSITIVE
            assert owners[0].kind is not K.GATEWAY
