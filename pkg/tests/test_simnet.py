import hashlib
import json
import random
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from iovsim.scenario import bundled_scenarios, load_scenario, run_scenario, verify_trace
from iovsim.simnet.adversary import AdversarySpec, AdvKind, apply_adversary
from iovsim.simnet.metrics import pair_delivery_ratio, percentile
from iovsim.simnet.world import EventKind, LinkSpec, Node, PastEvent, World


class Sink(Node):
    def __init__(self, node_id):
        super().__init__(node_id)
        self.got = []

    def receive(self, packet):
        self.got.append((self.world.now, packet.body))


class Relay(Sink):
    relay = True


def _oracle_seed(seed, key):
    return int.from_bytes(hashlib.sha256(f"{seed}:{key}".encode()).digest()[:8], "big")


def _close(world):
    world.emit("run_end", "test", in_flight=world.in_flight(), pending=world.pending_events())
    return world.trace


# scheduling


def test_same_time_events_run_in_insertion_order():
    w = World()
    seen = []
    w.action_handler = seen.append
    for tag in "abc":
        w.at(7, tag)
    w.at(3, "first")
    w.run_until(10)
    assert seen == ["first", "a", "b", "c"]


def test_past_event_rejected():
    w = World()
    w.run_until(10)
    assert w.now == 10
    with pytest.raises(PastEvent):
        w.schedule(9, EventKind.ACTION, "x", "late")
    w.schedule(10, EventKind.ACTION, "x", "now is fine")


def test_scheduling_at_current_time_runs_after_current_event():
    w = World()
    seen = []

    def handler(action):
        seen.append(action)
        if action == "outer":
            w.at(w.now, "inner")

    w.action_handler = handler
    w.at(5, "outer")
    w.at(5, "sibling")
    w.run_until(5)
    assert seen == ["outer", "sibling", "inner"]


def test_empty_queue_returns_empty_trace():
    assert World().run_until(1_000) == []


def test_latency_five_sent_at_ten():
    w = World()
    a, b = Sink("a"), Sink("b")
    w.add_node(a, backbone=True)
    w.add_node(b, backbone=True)
    w.add_link(LinkSpec("a", "b", latency=5))
    w.action_handler = lambda _: w.send("a", "b", "c", b"ping")
    w.at(10, "go")
    w.run_until(100)
    assert b.got == [(15, b"ping")]
    deliver = [e for e in w.trace if e["kind"] == "deliver"]
    assert [e["t"] for e in deliver] == [15]


def test_links_are_fifo_under_jitter():
    w = World(seed=3)
    a, b = Sink("a"), Sink("b")
    w.add_node(a, backbone=True)
    w.add_node(b, backbone=True)
    w.add_link(LinkSpec("a", "b", latency=1, jitter=6))
    w.action_handler = lambda i: w.send("a", "b", "c", bytes([i]))
    for i in range(50):
        w.at(i // 3, i)
    w.run_until(500)
    assert [body[0] for _, body in b.got] == list(range(50))


def test_link_spec_validation():
    with pytest.raises(ValueError):
        LinkSpec("a", "b", latency=-1)
    with pytest.raises(ValueError):
        LinkSpec("a", "b", loss_prob=1.5)


def test_inbox_overflow_expires_oldest():
    w = World(inbox_capacity=2, service_rate=1)
    a, b = Sink("a"), Sink("b")
    w.add_node(a, backbone=True)
    w.add_node(b, backbone=True)
    w.add_link(LinkSpec("a", "b", latency=1))
    w.action_handler = lambda _: [w.send("a", "b", "c", bytes([i])) for i in range(4)]
    w.at(0, "burst")
    w.run_until(50)
    trace = _close(w)
    assert [body[0] for _, body in b.got] == [2, 3]
    assert sum(e["kind"] == "expire" for e in trace) == 2
    assert verify_trace(trace).ok


# on-path adversaries


def _relay_world(seed, spec):
    w = World(seed=seed)
    for n in (Sink("a"), Sink("b")):
        w.add_node(n)
    w.add_node(Relay("r"), backbone=True)
    template = LinkSpec("x", "y", latency=1)
    w.attach("a", "r", template)
    w.attach("b", "r", template)
    w.relay_adversaries["r"] = [spec]
    return w


def test_black_hole_drops_everything():
    w = _relay_world(0, AdversarySpec(AdvKind.BLACK_HOLE, "bh", relay="r"))
    w.action_handler = lambda _: [w.send("a", "b", "data", b"m") for _ in range(100)]
    w.at(0, "go")
    w.run_until(1_000)
    assert w.nodes["b"].got == []
    assert sum(1 for e in w.trace if e["kind"] == "drop" and e["cause"] == "adversary") == 100
    assert w.adversary_seen["bh"] == 100


def test_black_hole_window_and_channels():
    spec = AdversarySpec(AdvKind.BLACK_HOLE, "bh", relay="r", channels=("rec",), window=(10, 20))
    w = _relay_world(0, spec)
    w.action_handler = lambda ch: w.send("a", "b", ch, b"m")
    for t in (0, 12, 25):
        w.at(t, "rec")
        w.at(t, "other")
    w.run_until(100)
    assert len(w.nodes["b"].got) == 5


def test_grey_hole_matches_seeded_oracle():
    spec = AdversarySpec(AdvKind.GREY_HOLE, "gh", relay="r", drop_prob=0.5)
    w = _relay_world(1, spec)
    w.action_handler = lambda _: [w.send("a", "b", "data", b"m") for _ in range(10)]
    for t in range(1_000):
        w.at(t, "burst")
    w.run_until(10_000)
    assert not any(e["kind"] == "expire" for e in w.trace)
    dropped = sum(1 for e in w.trace if e["kind"] == "drop" and e.get("adv") == "gh")
    oracle_rng = random.Random(_oracle_seed(1, "adv:gh"))
    oracle = sum(oracle_rng.random() < 0.5 for _ in range(10_000))
    assert w.adversary_seen["gh"] == 10_000
    assert dropped == oracle == 5047
    assert abs(dropped / 10_000 - 0.5) <= 0.05
    assert len(w.nodes["b"].got) == 10_000 - dropped


def test_adversary_streams_are_independent():
    # Adding an adversary must not perturb unrelated draws.
    assert World(seed=5).rng("link:a|b").random() == World(seed=5).rng("link:a|b").random()
    w = World(seed=5)
    w.rng("adv:x").random()
    assert w.rng("link:a|b").random() == World(seed=5).rng("link:a|b").random()


def test_active_kinds_ignore_transit():
    rng = random.Random(0)
    for kind in (AdvKind.DOS, AdvKind.SYBIL, AdvKind.IMPERSONATION, AdvKind.DDOS):
        assert apply_adversary(AdversarySpec(kind, "x"), "rec", b"body", rng).action == "forward"


def test_tamper_strategies():
    rng = random.Random(0)
    body = bytes(16)
    flipped = apply_adversary(AdversarySpec(AdvKind.TAMPER, "t", strategy="bitflip"), "rec", body, rng)
    assert flipped.action == "replace" and sum(bin(x).count("1") for x in flipped.bodies[0]) == 1
    cut = apply_adversary(AdversarySpec(AdvKind.TAMPER, "t", strategy="truncate"), "rec", body, rng)
    assert cut.bodies[0] == body[:-1]
    dup = apply_adversary(AdversarySpec(AdvKind.TAMPER, "t", strategy="replay"), "rec", body, rng)
    assert dup.action == "duplicate" and dup.bodies == (body, body)
    with pytest.raises(ValueError):
        AdversarySpec(AdvKind.TAMPER, "t", strategy="melt")


def test_percentile():
    assert percentile([], 95) == 0
    assert percentile(list(range(1, 101)), 95) == 95
    assert percentile(list(range(1, 11)), 50) == 5
    assert percentile([7], 50) == 7


# scenarios


def _run(name, **kw):
    return run_scenario(load_scenario(bundled_scenarios()[name]), **kw)


def _labels(result):
    return {addr.hex(): node for addr, node in result.sim.ctx.directory.items()}


def test_baseline_has_no_handshake_failures():
    r = _run("baseline")
    assert r.metrics["handshakes_failed"] == 0
    assert r.metrics["handshake_causes"] == {}
    assert r.passed


def test_mitm_breaks_transcripts_and_establishes_nothing_through_it():
    r = _run("mitm")
    assert r.metrics["handshakes_failed"] > 0
    assert set(r.metrics["handshake_causes"]) == {"failed:BadTranscriptSig"}
    swaps = [e for e in r.trace if e["kind"] == "adversary" and e["detail"].startswith("swap_ephemeral")]
    assert swaps
    labels = _labels(r)
    for e in r.trace:
        if e["kind"] == "handshake" and e["phase"] == "established":
            assert e["peer_eph_owner"] == labels[e["peer"]] + "/eph"
            assert not e["peer_eph_owner"].startswith("mallory")


def test_black_hole_isolates_pair():
    r = _run("black_hole")
    for a in ("veh0", "veh1", "veh2"):
        ratio = pair_delivery_ratio(r.trace, a, "veh3")
        assert ratio == 0.0
    assert pair_delivery_ratio(r.trace, "veh0", "veh1") == 1.0
    assert pair_delivery_ratio(r.trace, "nobody", "veh0") is None


def test_dos_paired_with_clean_run():
    sc = load_scenario(bundled_scenarios()["dos"])
    target = sc.adversaries[0].target
    attacked, clean = run_scenario(sc), run_scenario(replace(sc, adversaries=()))

    def latencies(result):
        return [
            e["t"] - e["sent_at"]
            for e in result.trace
            if e["kind"] == "deliver" and e["node"] == target and e["channel"] != "junk"
        ]

    assert attacked.metrics["processed_by_node"][target] >= clean.metrics["processed_by_node"][target]
    assert attacked.metrics["processed_by_node"][target] > 5 * clean.metrics["processed_by_node"][target]
    for q in (50, 95, 99):
        assert percentile(latencies(attacked), q) >= percentile(latencies(clean), q)
    assert attacked.metrics["expired"] > 0 == clean.metrics["expired"]


@pytest.mark.parametrize("name", ["mitm", "tamper"])
def test_on_path_adversary_never_holds_a_session_secret(name):
    # Every session key derives from two ephemerals owned by the endpoints.
    r = _run(name)
    labels = _labels(r)
    established = [e for e in r.trace if e["kind"] == "handshake" and e["phase"] == "established"]
    assert established
    for e in established:
        assert e["peer_eph_owner"] == labels[e["peer"]] + "/eph"
        assert e["own_eph_owner"] == e["node"] + "/eph"


# properties


@st.composite
def small_worlds(draw):
    seed = draw(st.integers(0, 2**32))
    n = draw(st.integers(2, 4))
    cap = draw(st.integers(1, 6))
    rate = draw(st.integers(1, 3))
    links = [
        (i, j, draw(st.integers(0, 4)), draw(st.sampled_from([0.0, 0.0, 0.3, 1.0])), draw(st.integers(0, 3)))
        for i in range(n)
        for j in range(i + 1, n)
        if draw(st.booleans()) or j == i + 1
    ]
    sends = draw(st.lists(st.tuples(st.integers(0, 20), st.integers(0, n - 1), st.integers(0, n - 1)), max_size=40))
    hole = draw(st.sampled_from([None, 0.0, 0.5, 1.0]))
    return seed, n, cap, rate, links, sends, hole, draw(st.integers(0, 60))


def _simulate(seed, n, cap, rate, links, sends, hole, t_end):
    w = World(seed=seed, inbox_capacity=cap, service_rate=rate)
    for i in range(n):
        w.add_node(Relay(f"n{i}"), backbone=True)
    for i, j, lat, loss, jitter in links:
        w.add_link(LinkSpec(f"n{i}", f"n{j}", lat, loss, True, jitter))
    if hole is not None:
        w.link_adversaries[frozenset(("n0", "n1"))] = [AdversarySpec(AdvKind.GREY_HOLE, "g", drop_prob=hole)]
    w.action_handler = lambda sd: w.send(f"n{sd[0]}", f"n{sd[1]}", "c", b"x")
    for t, s, d in sends:
        w.at(t, (s, d))
    w.run_until(t_end)
    return _close(w)


@given(small_worlds())
def test_prop_conservation_and_causality(cfg):
    trace = _simulate(*cfg)
    report = verify_trace(trace)
    assert report.ok, report.failures
    sent = [e for e in trace if e["kind"] == "send"]
    terminal = [e for e in trace if e["kind"] in ("deliver", "drop", "expire")]
    assert len(terminal) + trace[-1]["in_flight"] == len(sent)


@given(small_worlds())
def test_prop_determinism(cfg):
    a = [json.dumps(e, sort_keys=True) for e in _simulate(*cfg)]
    b = [json.dumps(e, sort_keys=True) for e in _simulate(*cfg)]
    assert a == b


def test_verify_catches_early_delivery():
    trace = _simulate(1, 2, 4, 4, [(0, 1, 3, 0.0, 0)], [(0, 0, 1)], None, 50)
    deliver = next(e for e in trace if e["kind"] == "deliver")
    deliver["t"] -= 1
    report = verify_trace(trace)
    assert not report.ok
    assert {v.invariant for v in report.violations} >= {"causality"}
