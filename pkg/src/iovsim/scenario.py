"""Scenario files: load, validate, run and verify.

A scenario is a JSON object::

    {
      "schema_version": 1,
      "name": "baseline",
      "seed": 1,
      "t_end": 2000,
      "crypto": "deterministic",
      "sim": {...},
      "topology": {"rsus": [...], "edge_servers": [...], "cloud": [...],
                   "backbone": {...}, "access": {...}, "links": [...]},
      "validators": [...],
      "byzantine": {"rsu0": "crash"},
      "vehicles": [...], "pedestrians": [...],
      "adversaries": [...],
      "workload": [{"t": 100, "op": "handshake", "from": "veh0", "to": "veh1"}],
      "expectations": [{"metric": "fake_sessions", "op": "==", "value": 0}]
    }

Runs are deterministic in ``(scenario, seed)``: the trace written by
:func:`run_scenario` is byte-identical across repeated runs.
"""

from __future__ import annotations

import json
import operator
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Union

from .crypto import PROVIDERS, make_provider
from .dbnr import DEFAULT_EXPIRY
from .ledger import Role, derive_address, genesis_state, make_genesis, make_revocation
from .pbft import EquivocatingReplica, Replica, ValidatorSetConfig
from .simnet.adversary import ON_PATH, TAMPER_STRATEGIES, AdversarySpec, AdvKind
from .simnet.metrics import METRICS, collect_metrics
from .simnet.nodes import (
    EndpointNode,
    Impersonator,
    JunkSource,
    ProtocolNode,
    RelayNode,
    SimContext,
    SybilNode,
    ValidatorNode,
)
from .simnet.world import LinkSpec, World
from .vehicle import (
    BusError,
    ComponentDescriptor,
    ComponentKind,
    ManifestError,
    Sensitivity,
    VehicleBus,
    export_component,
)

SCHEMA_VERSION = 1
BYZANTINE_MODES = ("crash", "equivocate")
WORKLOAD_OPS = ("handshake", "handshake_all", "send", "dbnr_update", "revoke", "export")
EXPECTATION_OPS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}
TOP_LEVEL = (
    "schema_version",
    "name",
    "description",
    "seed",
    "t_end",
    "crypto",
    "sim",
    "topology",
    "validators",
    "byzantine",
    "vehicles",
    "pedestrians",
    "adversaries",
    "workload",
    "expectations",
)


class ScenarioError(ValueError):
    pass


class ParseError(ScenarioError):
    """Not valid JSON."""


class ValidationError(ScenarioError):
    """Valid JSON that does not describe a runnable scenario."""


# model


@dataclass(frozen=True)
class LinkTemplate:
    latency: int = 1
    loss_prob: float = 0.0
    jitter: int = 0


@dataclass(frozen=True)
class LinkOverride:
    a: str
    b: str
    latency: int = 1
    loss_prob: float = 0.0
    jitter: int = 0
    up: bool = True


@dataclass(frozen=True)
class AttachedSpec:
    id: str
    attach: str


@dataclass(frozen=True)
class Topology:
    rsus: tuple[str, ...]
    edge_servers: tuple[str, ...] = ()
    cloud: tuple[AttachedSpec, ...] = ()
    backbone: LinkTemplate = LinkTemplate(2)
    access: LinkTemplate = LinkTemplate(1)
    links: tuple[LinkOverride, ...] = ()

    @property
    def infrastructure(self) -> tuple[str, ...]:
        return self.rsus + self.edge_servers


@dataclass(frozen=True)
class ComponentSpec:
    id: str
    kind: str = "SENSOR"
    sensitivity: str = "NON_SENSITIVE"
    export: bool = False


@dataclass(frozen=True)
class Waypoint:
    t: int
    rsu: str


@dataclass(frozen=True)
class EndpointSpec:
    id: str
    attach: str
    join_at: int = 0
    components: tuple[ComponentSpec, ...] = ()
    waypoints: tuple[Waypoint, ...] = ()


@dataclass(frozen=True)
class AdversaryEntry:
    kind: str
    name: str
    relay: Optional[str] = None
    link: Optional[tuple[str, str]] = None
    target: Optional[str] = None
    targets: tuple[str, ...] = ()
    rate: int = 0
    drop_prob: float = 0.0
    count: int = 0
    victim: Optional[str] = None
    strategy: str = "bitflip"
    channels: tuple[str, ...] = ()
    window: tuple[int, int] = (0, 2**63 - 1)
    attach: Optional[str] = None
    start: int = 0

    def spec(self) -> AdversarySpec:
        return AdversarySpec(
            AdvKind(self.kind),
            self.name,
            relay=self.relay,
            link=self.link,
            target=self.target,
            targets=self.targets,
            rate=self.rate,
            drop_prob=self.drop_prob,
            count=self.count,
            victim=self.victim,
            strategy=self.strategy,
            channels=self.channels,
            window=self.window,
        )


@dataclass(frozen=True)
class WorkloadOp:
    t: int
    op: str
    args: tuple[tuple[str, Any], ...] = ()

    def get(self, key: str, default: Any = None) -> Any:
        return dict(self.args).get(key, default)


@dataclass(frozen=True)
class Expectation:
    metric: str
    op: str
    value: Union[int, float]

    def check(self, metrics: Mapping[str, Any]) -> bool:
        return bool(EXPECTATION_OPS[self.op](metrics[self.metric], self.value))


@dataclass(frozen=True)
class SimParams:
    inbox_capacity: int = 256
    service_rate: int = 64
    view_timeout: int = 50
    checkpoint_interval: int = 16
    max_batch: int = 64
    dbnr_expiry: int = DEFAULT_EXPIRY


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: Topology
    t_end: int
    seed: int = 1
    description: str = ""
    crypto: str = "deterministic"
    sim: SimParams = SimParams()
    validators: tuple[str, ...] = ()
    byzantine: tuple[tuple[str, str], ...] = ()
    vehicles: tuple[EndpointSpec, ...] = ()
    pedestrians: tuple[EndpointSpec, ...] = ()
    adversaries: tuple[AdversaryEntry, ...] = ()
    workload: tuple[WorkloadOp, ...] = ()
    expectations: tuple[Expectation, ...] = ()

    @property
    def validator_ids(self) -> tuple[str, ...]:
        return self.validators or self.topology.infrastructure

    @property
    def endpoints(self) -> tuple[Union[EndpointSpec, AttachedSpec], ...]:
        return self.topology.cloud + self.vehicles + self.pedestrians


# parsing


def _tuple(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tuple(v) for v in value)
    return value


def _untuple(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_untuple(v) for v in value]
    return value


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def _obj(d: Any, where: str, allowed: Iterable[str], required: Iterable[str] = ()) -> dict:
    _expect(isinstance(d, dict), f"{where}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    _expect(not unknown, f"{where}: unknown keys {unknown}")
    missing = sorted(set(required) - set(d))
    _expect(not missing, f"{where}: missing keys {missing}")
    return d


def _int(v: Any, where: str, lo: int = 0, hi: int = 2**63 - 1) -> int:
    _expect(isinstance(v, int) and not isinstance(v, bool), f"{where}: expected an integer")
    _expect(lo <= v <= hi, f"{where}: {v} out of range [{lo}, {hi}]")
    return v


def _prob(v: Any, where: str) -> float:
    _expect(isinstance(v, (int, float)) and not isinstance(v, bool), f"{where}: expected a number")
    _expect(0.0 <= v <= 1.0, f"{where}: probability out of range")
    return float(v)


def _str(v: Any, where: str) -> str:
    _expect(isinstance(v, str) and v != "", f"{where}: expected a non-empty string")
    return v


def _str_list(v: Any, where: str) -> tuple[str, ...]:
    _expect(isinstance(v, list), f"{where}: expected a list")
    return tuple(_str(x, f"{where}[{i}]") for i, x in enumerate(v))


def _template(d: Any, where: str, default: LinkTemplate) -> LinkTemplate:
    if d is None:
        return default
    _obj(d, where, ("latency", "loss_prob", "jitter"))
    return LinkTemplate(
        _int(d.get("latency", default.latency), f"{where}.latency", 1),
        _prob(d.get("loss_prob", default.loss_prob), f"{where}.loss_prob"),
        _int(d.get("jitter", default.jitter), f"{where}.jitter"),
    )


def _endpoint(d: Any, where: str, vehicle: bool) -> EndpointSpec:
    keys = ("id", "attach", "join_at") + (("components", "waypoints") if vehicle else ())
    _obj(d, where, keys, ("id", "attach"))
    comps = []
    for i, c in enumerate(d.get("components", [])):
        cw = f"{where}.components[{i}]"
        _obj(c, cw, ("id", "kind", "sensitivity", "export"), ("id",))
        kind = c.get("kind", "SENSOR")
        sens = c.get("sensitivity", "NON_SENSITIVE")
        _expect(kind in ComponentKind.__members__ and kind != "GATEWAY", f"{cw}.kind: unknown kind {kind!r}")
        _expect(sens in Sensitivity.__members__, f"{cw}.sensitivity: unknown {sens!r}")
        _expect(isinstance(c.get("export", False), bool), f"{cw}.export: expected a boolean")
        comps.append(ComponentSpec(_str(c["id"], f"{cw}.id"), kind, sens, c.get("export", False)))
    wps = []
    for i, w in enumerate(d.get("waypoints", [])):
        ww = f"{where}.waypoints[{i}]"
        _obj(w, ww, ("t", "rsu"), ("t", "rsu"))
        wps.append(Waypoint(_int(w["t"], f"{ww}.t"), _str(w["rsu"], f"{ww}.rsu")))
    _expect([w.t for w in wps] == sorted(w.t for w in wps), f"{where}.waypoints: not in time order")
    return EndpointSpec(
        _str(d["id"], f"{where}.id"),
        _str(d["attach"], f"{where}.attach"),
        _int(d.get("join_at", 0), f"{where}.join_at"),
        tuple(comps),
        tuple(wps),
    )


_ADV_FIELDS = tuple(f.name for f in AdversaryEntry.__dataclass_fields__.values())


def _adversary(d: Any, where: str) -> AdversaryEntry:
    _obj(d, where, _ADV_FIELDS, ("kind", "name"))
    kind = d["kind"]
    _expect(kind in {k.value for k in AdvKind}, f"{where}.kind: unknown adversary {kind!r}")
    args = dict(d)
    if "link" in args:
        _expect(isinstance(args["link"], list) and len(args["link"]) == 2, f"{where}.link: expected [a, b]")
    for key in ("targets", "channels"):
        if key in args:
            _str_list(args[key], f"{where}.{key}")
    if "window" in args:
        w = args["window"]
        _expect(isinstance(w, list) and len(w) == 2, f"{where}.window: expected [start, end]")
        _expect(_int(w[0], f"{where}.window") <= _int(w[1], f"{where}.window"), f"{where}.window: start after end")
    if "drop_prob" in args:
        _prob(args["drop_prob"], f"{where}.drop_prob")
    for key in ("rate", "count", "start"):
        if key in args:
            _int(args[key], f"{where}.{key}")
    if "strategy" in args:
        _expect(args["strategy"] in TAMPER_STRATEGIES, f"{where}.strategy: unknown {args['strategy']!r}")
    entry = AdversaryEntry(**{k: _tuple(v) for k, v in args.items()})
    k = AdvKind(kind)
    if k in ON_PATH:
        _expect((entry.relay is None) != (entry.link is None), f"{where}: on-path adversary needs exactly one of relay/link")
    if k in (AdvKind.DOS, AdvKind.DDOS):
        _expect(entry.rate > 0 and (entry.target or entry.targets), f"{where}: flood needs rate and target(s)")
    if k is AdvKind.IMPERSONATION:
        _expect(entry.victim is not None, f"{where}: impersonation needs a victim")
    if k is AdvKind.SYBIL:
        _expect(entry.count > 0, f"{where}: sybil needs count > 0")
    return entry


def _workload(d: Any, where: str) -> WorkloadOp:
    _expect(isinstance(d, dict) and "t" in d and "op" in d, f"{where}: needs t and op")
    op = d["op"]
    _expect(op in WORKLOAD_OPS, f"{where}.op: unknown op {op!r}")
    required = {
        "handshake": ("from", "to"),
        "handshake_all": (),
        "send": ("from", "to"),
        "dbnr_update": ("node",),
        "revoke": ("by", "target"),
        "export": ("vehicle", "component"),
    }[op]
    args = {k: v for k, v in d.items() if k not in ("t", "op")}
    missing = [k for k in required if k not in args]
    _expect(not missing, f"{where}: {op} needs {missing}")
    for key in ("count", "per_tick"):
        if key in args:
            _int(args[key], f"{where}.{key}", 1)
    return WorkloadOp(_int(d["t"], f"{where}.t"), op, tuple(sorted((k, _tuple(v)) for k, v in args.items())))


def scenario_from_dict(d: Any) -> Scenario:
    _obj(d, "scenario", TOP_LEVEL, ("schema_version", "name", "topology", "t_end"))
    _expect(d["schema_version"] == SCHEMA_VERSION, f"schema_version: expected {SCHEMA_VERSION}")
    topo = _obj(d["topology"], "topology", ("rsus", "edge_servers", "cloud", "backbone", "access", "links"), ("rsus",))
    links = []
    for i, link in enumerate(topo.get("links", [])):
        lw = f"topology.links[{i}]"
        _obj(link, lw, ("a", "b", "latency", "loss_prob", "jitter", "up"), ("a", "b"))
        links.append(
            LinkOverride(
                _str(link["a"], f"{lw}.a"),
                _str(link["b"], f"{lw}.b"),
                _int(link.get("latency", 1), f"{lw}.latency", 1),
                _prob(link.get("loss_prob", 0.0), f"{lw}.loss_prob"),
                _int(link.get("jitter", 0), f"{lw}.jitter"),
                bool(link.get("up", True)),
            )
        )
    cloud = []
    for i, c in enumerate(topo.get("cloud", [])):
        _obj(c, f"topology.cloud[{i}]", ("id", "attach"), ("id", "attach"))
        cloud.append(AttachedSpec(_str(c["id"], "cloud.id"), _str(c["attach"], "cloud.attach")))
    topology = Topology(
        _str_list(topo["rsus"], "topology.rsus"),
        _str_list(topo.get("edge_servers", []), "topology.edge_servers"),
        tuple(cloud),
        _template(topo.get("backbone"), "topology.backbone", LinkTemplate(2)),
        _template(topo.get("access"), "topology.access", LinkTemplate(1)),
        tuple(links),
    )
    sim_d = _obj(d.get("sim", {}), "sim", SimParams.__dataclass_fields__)
    sim = SimParams(**{k: _int(v, f"sim.{k}", 1) for k, v in sim_d.items()})
    crypto = d.get("crypto", "deterministic")
    _expect(crypto in PROVIDERS, f"crypto: unknown provider {crypto!r}")
    byz = d.get("byzantine", {})
    _expect(isinstance(byz, dict), "byzantine: expected an object")
    for node, mode in byz.items():
        _expect(mode in BYZANTINE_MODES, f"byzantine.{node}: unknown mode {mode!r}")
    exps = []
    for i, e in enumerate(d.get("expectations", [])):
        ew = f"expectations[{i}]"
        _obj(e, ew, ("metric", "op", "value"), ("metric", "op", "value"))
        _expect(e["metric"] in METRICS, f"{ew}.metric: unknown metric {e['metric']!r}")
        _expect(e["op"] in EXPECTATION_OPS, f"{ew}.op: unknown operator {e['op']!r}")
        _expect(isinstance(e["value"], (int, float)) and not isinstance(e["value"], bool), f"{ew}.value: expected a number")
        exps.append(Expectation(e["metric"], e["op"], e["value"]))
    sc = Scenario(
        name=_str(d["name"], "name"),
        topology=topology,
        t_end=_int(d["t_end"], "t_end", 1),
        seed=_int(d.get("seed", 1), "seed", 0, 2**64 - 1),
        description=d.get("description", ""),
        crypto=crypto,
        sim=sim,
        validators=_str_list(d.get("validators", []), "validators"),
        byzantine=tuple(sorted(byz.items())),
        vehicles=tuple(_endpoint(v, f"vehicles[{i}]", True) for i, v in enumerate(d.get("vehicles", []))),
        pedestrians=tuple(_endpoint(p, f"pedestrians[{i}]", False) for i, p in enumerate(d.get("pedestrians", []))),
        adversaries=tuple(_adversary(a, f"adversaries[{i}]") for i, a in enumerate(d.get("adversaries", []))),
        workload=tuple(_workload(w, f"workload[{i}]") for i, w in enumerate(d.get("workload", []))),
        expectations=tuple(exps),
    )
    _check_references(sc)
    return sc


def _check_references(sc: Scenario) -> None:
    infra = sc.topology.infrastructure
    ids = list(infra) + [e.id for e in sc.endpoints]
    dup = sorted(k for k, c in Counter(ids).items() if c > 1)
    _expect(not dup, f"duplicate node ids {dup}")
    _expect(all("." not in i for i in ids), "node ids may not contain '.'")
    _expect(len(set(infra)) > 0, "topology needs at least one RSU")
    for v in sc.validator_ids:
        _expect(v in infra, f"validator {v!r} is not an RSU or edge server")
    _expect(len(set(sc.validator_ids)) == len(sc.validator_ids), "duplicate validators")
    for node, _ in sc.byzantine:
        _expect(node in sc.validator_ids, f"byzantine node {node!r} is not a validator")
    f = (len(sc.validator_ids) - 1) // 3
    _expect(len(sc.byzantine) <= f, f"{len(sc.byzantine)} byzantine validators exceed f={f}")
    for e in sc.endpoints:
        _expect(e.attach in sc.topology.rsus or e.attach in sc.topology.edge_servers, f"{e.id}: attach {e.attach!r} unknown")
    for v in sc.vehicles:
        for w in v.waypoints:
            _expect(w.rsu in sc.topology.rsus, f"{v.id}: waypoint rsu {w.rsu!r} unknown")
        cids = [c.id for c in v.components]
        _expect(len(set(cids)) == len(cids), f"{v.id}: duplicate component ids")
        _expect("gateway" not in cids, f"{v.id}: the gateway is implicit")
        for c in v.components:
            _expect(not (c.export and c.sensitivity == "SENSITIVE"), f"{v.id}.{c.id}: sensitive components cannot be exported")
    for link in sc.topology.links:
        _expect(link.a in infra and link.b in infra, f"link {link.a}-{link.b}: only backbone links can be overridden")
    names = [a.name for a in sc.adversaries]
    _expect(len(set(names)) == len(names), "duplicate adversary names")
    known = set(ids)
    for a in sc.adversaries:
        for ref in filter(None, (a.relay, a.target, a.victim, a.attach, *a.targets, *(a.link or ()))):
            _expect(ref in known, f"adversary {a.name}: unknown node {ref!r}")
        if a.relay is not None:
            _expect(a.relay in infra, f"adversary {a.name}: relay must be an RSU or edge server")
    vehicle_ids = {v.id for v in sc.vehicles}
    for w in sc.workload:
        for key in ("from", "node", "by"):
            ref = w.get(key)
            if ref is not None:
                _expect(ref in known, f"workload at t={w.t}: unknown node {ref!r}")
        if w.op == "export":
            _expect(w.get("vehicle") in vehicle_ids, f"workload at t={w.t}: unknown vehicle")


def _template_dict(t: LinkTemplate) -> dict:
    return {"latency": t.latency, "loss_prob": t.loss_prob, "jitter": t.jitter}


def _endpoint_dict(e: EndpointSpec, vehicle: bool) -> dict:
    d: dict[str, Any] = {"id": e.id, "attach": e.attach, "join_at": e.join_at}
    if vehicle:
        d["components"] = [
            {"id": c.id, "kind": c.kind, "sensitivity": c.sensitivity, "export": c.export} for c in e.components
        ]
        d["waypoints"] = [{"t": w.t, "rsu": w.rsu} for w in e.waypoints]
    return d


def scenario_to_dict(sc: Scenario) -> dict:
    """Canonical form: every field explicit, so ``from_dict(to_dict(s)) == s``."""
    adv_default = AdversaryEntry("", "")
    return {
        "schema_version": SCHEMA_VERSION,
        "name": sc.name,
        "description": sc.description,
        "seed": sc.seed,
        "t_end": sc.t_end,
        "crypto": sc.crypto,
        "sim": dict(sc.sim.__dict__),
        "topology": {
            "rsus": list(sc.topology.rsus),
            "edge_servers": list(sc.topology.edge_servers),
            "cloud": [{"id": c.id, "attach": c.attach} for c in sc.topology.cloud],
            "backbone": _template_dict(sc.topology.backbone),
            "access": _template_dict(sc.topology.access),
            "links": [dict(link.__dict__) for link in sc.topology.links],
        },
        "validators": list(sc.validators),
        "byzantine": dict(sc.byzantine),
        "vehicles": [_endpoint_dict(v, True) for v in sc.vehicles],
        "pedestrians": [_endpoint_dict(p, False) for p in sc.pedestrians],
        "adversaries": [
            {k: _untuple(v) for k, v in a.__dict__.items() if k in ("kind", "name") or v != getattr(adv_default, k)}
            for a in sc.adversaries
        ],
        "workload": [{"t": w.t, "op": w.op, **{k: _untuple(v) for k, v in w.args}} for w in sc.workload],
        "expectations": [{"metric": e.metric, "op": e.op, "value": e.value} for e in sc.expectations],
    }


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=2, sort_keys=True) + "\n"


def loads_scenario(text: str) -> Scenario:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc
    return scenario_from_dict(d)


def load_scenario(path: Union[str, Path]) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    return loads_scenario(text)


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("iovsim") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name) if p.name.endswith(".json")}


# running


@dataclass
class Simulation:
    scenario: Scenario
    seed: int
    world: World
    ctx: SimContext
    nodes: dict[str, Any] = field(default_factory=dict)
    adversaries: list[AdversarySpec] = field(default_factory=list)


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    trace: list[dict]
    metrics: dict[str, Any]
    expectations: list[tuple[Expectation, bool]]
    verdict: "VerifyReport"
    sim: Simulation

    @property
    def passed(self) -> bool:
        return self.verdict.ok and all(ok for _, ok in self.expectations)


def build(sc: Scenario, seed: Optional[int] = None, trace_sink=None) -> Simulation:
    seed = sc.seed if seed is None else seed
    crypto = make_provider(sc.crypto, seed)
    topo = sc.topology
    roles = {r: Role.RSU for r in topo.rsus} | {e: Role.EDGE_SERVER for e in topo.edge_servers}
    infra_keys = {n: crypto.signing_key(n) for n in topo.infrastructure}
    genesis_block = make_genesis(crypto, [(infra_keys[n], roles[n]) for n in topo.infrastructure])
    genesis = genesis_state(genesis_block, crypto)
    validators = sc.validator_ids
    cfg = ValidatorSetConfig(
        tuple(derive_address(crypto, infra_keys[v].public) for v in validators),
        view_timeout=sc.sim.view_timeout,
        checkpoint_interval=sc.sim.checkpoint_interval,
        max_batch=sc.sim.max_batch,
    )
    world = World(seed, inbox_capacity=sc.sim.inbox_capacity, service_rate=sc.sim.service_rate, trace_sink=trace_sink)
    ctx = SimContext(world, crypto, cfg, genesis, dbnr_expiry=sc.sim.dbnr_expiry)
    sim = Simulation(sc, seed, world, ctx)
    byz = dict(sc.byzantine)

    for n in topo.infrastructure:
        key = infra_keys[n]
        ctx.directory[derive_address(crypto, key.public)] = n
        if n in validators:
            mode = byz.get(n, "honest")
            if mode == "equivocate":
                rng = world.rng(f"split:{n}")
                replica: Replica = EquivocatingReplica(
                    cfg, key, crypto, genesis, split=lambda addrs, rng=rng: {a for a in addrs if rng.random() < 0.5}
                )
            else:
                replica = Replica(cfg, key, crypto, genesis)
            node: ProtocolNode = ValidatorNode(n, ctx, key, replica, mode)
            ctx.validator_nodes.append(n)
        else:
            node = RelayNode(n, ctx, key)
            ctx.light_clients.append(n)
        world.add_node(node, backbone=True)
        sim.nodes[n] = node
    infra = list(topo.infrastructure)
    for i, a in enumerate(infra):
        for b in infra[i + 1 :]:
            t = topo.backbone
            world.add_link(LinkSpec(a, b, t.latency, t.loss_prob, True, t.jitter))
    for o in topo.links:
        world.add_link(LinkSpec(o.a, o.b, o.latency, o.loss_prob, o.up, o.jitter))

    def add_endpoint(spec: Union[EndpointSpec, AttachedSpec], role: Role) -> None:
        key = crypto.signing_key(spec.id)
        bus = None
        if isinstance(spec, EndpointSpec) and role is Role.VEHICLE:
            bus = VehicleBus.from_components(
                spec.id,
                [
                    ComponentDescriptor(c.id, ComponentKind[c.kind], Sensitivity[c.sensitivity], export=c.export)
                    for c in spec.components
                ],
            )
        node = EndpointNode(
            spec.id,
            ctx,
            key,
            role,
            sponsor_key=infra_keys[spec.attach],
            bus=bus,
            join_at=getattr(spec, "join_at", 0),
        )
        world.add_node(node)
        world.attach(spec.id, spec.attach, _access_link(topo.access))
        ctx.directory[node.address] = spec.id
        ctx.light_clients.append(spec.id)
        sim.nodes[spec.id] = node

    for c in topo.cloud:
        add_endpoint(c, Role.CLOUD_SERVER)
    for v in sc.vehicles:
        add_endpoint(v, Role.VEHICLE)
        for w in v.waypoints:
            world.at(w.t, ("move", v.id, w.rsu))
    for p in sc.pedestrians:
        add_endpoint(p, Role.PEDESTRIAN)

    for entry in sc.adversaries:
        _add_adversary(sim, entry)
    for w in sc.workload:
        _schedule_op(sim, w)
    world.action_handler = lambda action: _run_action(sim, action)
    return sim


def _access_link(t: LinkTemplate) -> LinkSpec:
    return LinkSpec("", "", t.latency, t.loss_prob, True, t.jitter)


def _add_adversary(sim: Simulation, entry: AdversaryEntry) -> None:
    world, ctx, crypto = sim.world, sim.ctx, sim.ctx.crypto
    spec = entry.spec()
    sim.adversaries.append(spec)
    kind = spec.kind
    default_attach = sim.scenario.topology.rsus[0]
    if kind in ON_PATH:
        if spec.relay is not None:
            world.relay_adversaries.setdefault(spec.relay, []).append(spec)
        else:
            assert spec.link is not None
            world.link_adversaries.setdefault(frozenset(spec.link), []).append(spec)
        if kind is AdvKind.MITM:
            eph = crypto.agreement_key(f"adv:{spec.name}")
            world.adversary_context.setdefault("mitm_ephemeral", {})[spec.name] = eph.public
        return
    if kind in (AdvKind.DOS, AdvKind.DDOS):
        targets = list(spec.targets) or [spec.target]
        sources = max(spec.count, 1) if kind is AdvKind.DDOS else 1
        rsus = sim.scenario.topology.rsus
        for i in range(sources):
            nid = f"{spec.name}.{i}" if sources > 1 else spec.name
            attach = entry.attach or rsus[i % len(rsus)]
            rate = max(spec.rate // sources, 1)
            node = JunkSource(nid, world, targets, rate, spec.window, spec.name)
            world.add_node(node)
            world.attach(nid, attach, _access_link(sim.scenario.topology.access))
            sim.nodes[nid] = node
        return
    victims = [t for t in (spec.targets or ((spec.target,) if spec.target else ()))]
    if kind is AdvKind.SYBIL:
        for i in range(spec.count):
            nid = f"{spec.name}.{i}"
            key = crypto.signing_key(f"adv:{nid}")
            ctx.adversary_keys.append(key.public)
            node = SybilNode(nid, ctx, key, victims, entry.start, spec.name)
            world.add_node(node)
            world.attach(nid, entry.attach or default_attach, _access_link(sim.scenario.topology.access))
            sim.nodes[nid] = node
        return
    if kind is AdvKind.IMPERSONATION:
        key = crypto.signing_key(f"adv:{spec.name}")
        ctx.adversary_keys.append(key.public)
        victim = sim.nodes[spec.victim]
        node = Impersonator(spec.name, ctx, key, victim.address, victims, entry.start, spec.name)
        world.add_node(node)
        world.attach(spec.name, entry.attach or default_attach, _access_link(sim.scenario.topology.access))
        sim.nodes[spec.name] = node


def _schedule_op(sim: Simulation, w: WorkloadOp) -> None:
    if w.op == "send":
        count = w.get("count", 1)
        per_tick = w.get("per_tick", count)
        t, left = w.t, count
        while left > 0:
            n = min(per_tick, left)
            sim.world.at(t, ("send", w, n))
            t += w.get("interval", 1)
            left -= n
    else:
        sim.world.at(w.t, ("op", w))


def _address_of(sim: Simulation, name: str) -> Optional[bytes]:
    if "." in name:
        vid, cid = name.split(".", 1)
        node = sim.nodes.get(vid)
        if isinstance(node, EndpointNode) and node.bus is not None and cid in node.bus.components:
            return node.bus.components[cid].address
        return None
    node = sim.nodes.get(name)
    return node.address if isinstance(node, ProtocolNode) else None


def _run_action(sim: Simulation, action: Any) -> None:
    world = sim.world
    tag = action[0]
    if tag == "move":
        _, vid, rsu = action
        sim.nodes[vid].move(rsu, _access_link(sim.scenario.topology.access))
        return
    w: WorkloadOp = action[1]
    note = {"op": w.op, **{k: _untuple(v) for k, v in w.args if k not in ("payload",)}}
    if tag == "send":
        src = sim.nodes[w.get("from")]
        to = w.get("to")
        peer = _address_of(sim, to)
        if peer is None or not isinstance(src, EndpointNode) or not src.registered:
            world.emit("action", "scenario", **note, error="Unresolvable" if peer is None else "NotReady")
            return
        component = w.get("component") or (to.split(".", 1)[1] if "." in to else "gateway")
        payload = str(w.get("payload", "hello")).encode()
        for _ in range(action[2]):
            src.send_app(peer, component, payload)
        return
    world.emit("action", "scenario", **note)
    if w.op == "handshake":
        src, peer = sim.nodes[w.get("from")], _address_of(sim, w.get("to"))
        if peer is None:
            world.emit("action", "scenario", op=w.op, error="Unresolvable", to=w.get("to"))
        elif isinstance(src, EndpointNode):
            src.connect(peer)
    elif w.op == "handshake_all":
        names = list(w.get("nodes", ())) or [v.id for v in sim.scenario.vehicles]
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                src = sim.nodes[a]
                if isinstance(src, EndpointNode):
                    src.connect(sim.nodes[b].address)
    elif w.op == "dbnr_update":
        node = sim.nodes[w.get("node")]
        if isinstance(node, EndpointNode):
            node.update_dbnr("workload")
    elif w.op == "revoke":
        by = sim.nodes[w.get("by")]
        target = _address_of(sim, w.get("target"))
        if target is None:
            world.emit("action", "scenario", op=w.op, error="Unresolvable")
            return
        world.emit("revoked", w.get("by"), target=target.hex())
        by.submit([make_revocation(sim.ctx.crypto, by.key, target)], f"revoke:{w.get('target')}")
    elif w.op == "export":
        node = sim.nodes[w.get("vehicle")]
        assert isinstance(node, EndpointNode) and node.bus is not None
        try:
            txs = export_component(node.bus, sim.ctx.crypto, node.key, w.get("component"), node.ledger_view(), expires_at=2**62)
        except (BusError, ManifestError) as exc:
            world.emit("export", node.node_id, component=w.get("component"), error=exc.reason if isinstance(exc, BusError) else str(exc))
            return
        except Exception as exc:  # RevokedIdentity
            world.emit("export", node.node_id, component=w.get("component"), error=type(exc).__name__)
            return
        comp = node.bus.components[w.get("component")]
        sim.ctx.directory[comp.address] = node.node_id
        world.emit("export", node.node_id, component=comp.component_id, address=comp.address.hex())
        node.submit(list(txs), f"export:{comp.component_id}")


def run_scenario(sc: Scenario, seed: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> RunResult:
    seed = sc.seed if seed is None else seed
    sink = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sink = (out / "trace.jsonl").open("w")
    try:
        sim = build(sc, seed, trace_sink=sink)
        world = sim.world
        world.emit(
            "run_start",
            "scenario",
            scenario=sc.name,
            seed=seed,
            validators=list(sim.ctx.validator_nodes),
            byzantine=dict(sc.byzantine),
            f=sim.ctx.cfg.f,
        )
        world.start()
        world.run_until(sc.t_end)
        world.emit("run_end", "scenario", in_flight=world.in_flight(), pending=world.pending_events())
    finally:
        if sink is not None:
            sink.close()
    trace = world.trace
    metrics = collect_metrics(trace, sim.ctx, sim.nodes, sim.adversaries)
    checks = [(e, e.check(metrics)) for e in sc.expectations]
    verdict = verify_trace(trace)
    if out_dir is not None:
        report = {
            "scenario": sc.name,
            "seed": seed,
            "metrics": metrics,
            "expectations": [
                {"metric": e.metric, "op": e.op, "value": e.value, "actual": metrics[e.metric], "pass": ok} for e, ok in checks
            ],
            "verify": {"ok": verdict.ok, "stats": verdict.stats, "failures": verdict.failures},
        }
        (Path(out_dir) / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return RunResult(sc, seed, trace, metrics, checks, verdict, sim)


# trace verification


@dataclass(frozen=True)
class Violation:
    invariant: str  # ordering | conservation | causality | agreement | isolation | schema
    line: int  # 1-based line in the trace file (0: whole trace)
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}" if self.line else "trace"
        return f"{self.invariant}: {where}: {self.message}"


class VerdictFail(Exception):
    def __init__(self, violation: Violation) -> None:
        super().__init__(str(violation))
        self.invariant = violation.invariant
        self.line = violation.line


@dataclass
class VerifyReport:
    ok: bool
    violations: list[Violation]
    stats: dict[str, int]

    @property
    def failures(self) -> list[str]:
        return [str(v) for v in self.violations]

    def raise_if_failed(self) -> None:
        if self.violations:
            raise VerdictFail(self.violations[0])


_TERMINAL = ("deliver", "drop", "expire")


def verify_trace(records: Iterable[dict], max_failures: int = 20) -> VerifyReport:
    """Re-check global invariants from a trace alone.

    * ordering: ``n`` counts up from 0 and ``t`` never decreases;
    * conservation: every sent packet has at most one terminal event, no
      terminal lacks a send, and the unterminated count matches ``run_end``;
    * causality: a delivery is no earlier than send time plus the path's
      latency floor;
    * agreement: honest validators never commit or execute different
      digests at the same sequence number;
    * isolation: nothing External is ever delivered to a sensitive component.
    """
    violations: list[Violation] = []

    def fail(invariant: str, line: int, msg: str) -> None:
        if len(violations) < max_failures:
            violations.append(Violation(invariant, line, msg))

    sends: dict[int, tuple[int, dict]] = {}
    terminals: Counter = Counter()
    committed: dict[int, dict[str, int]] = defaultdict(dict)
    executed: dict[int, dict[str, int]] = defaultdict(dict)
    honest_nodes: Optional[set[str]] = None
    prev_t, expected_n = 0, 0
    gaps: list[int] = []
    run_end: Optional[tuple[int, dict]] = None
    line = 0
    for line, ev in enumerate(records, 1):
        missing = [k for k in ("t", "n", "kind", "node") if k not in ev]
        if missing:
            fail("schema", line, f"missing {missing}")
            continue
        if ev["n"] != expected_n:
            gaps.append(line)
            fail("ordering", line, f"record n={ev['n']} follows n={expected_n - 1}")
        expected_n = ev["n"] + 1
        if ev["t"] < prev_t:
            fail("ordering", line, f"time went backwards ({ev['t']} < {prev_t})")
        prev_t = ev["t"]
        kind = ev["kind"]
        if kind == "run_start":
            honest_nodes = set(ev.get("validators", [])) - set(ev.get("byzantine", {}))
        elif kind == "send":
            if ev["pid"] in sends:
                fail("conservation", line, f"pid {ev['pid']} sent twice")
            sends[ev["pid"]] = (line, ev)
        elif kind in _TERMINAL:
            pid = ev["pid"]
            if pid not in sends:
                fail("conservation", line, f"pid {pid}: {kind} without a send")
                continue
            terminals[pid] += 1
            if terminals[pid] > 1:
                fail("conservation", line, f"pid {pid}: more than one terminal event")
            if kind == "deliver":
                s = sends[pid][1]
                if ev["t"] - s["t"] < s["floor"]:
                    fail("causality", line, f"pid {pid} delivered {ev['t'] - s['t']} ticks after send, floor {s['floor']}")
        elif kind in ("commit", "execute"):
            if ev.get("honest") and (honest_nodes is None or ev["node"] in honest_nodes):
                table = committed if kind == "commit" else executed
                seen = table[ev["seq"]]
                if ev["digest"] not in seen:
                    seen[ev["digest"]] = line
                    if len(seen) > 1:
                        fail("agreement", line, f"seq {ev['seq']}: honest validators {kind} two different digests")
        elif kind == "bus":
            if ev.get("outcome") == "delivered" and ev.get("origin") == "External" and ev.get("sensitivity") == "SENSITIVE":
                fail("isolation", line, f"External message delivered to sensitive component {ev.get('dst')}")
        elif kind == "run_end":
            run_end = (line, ev)
    unterminated = sorted(pid for pid in sends if pid not in terminals)
    if run_end is None:
        fail("conservation", line, "trace has no run_end record")
    elif run_end[1]["in_flight"] != len(unterminated):
        first = unterminated[0] if unterminated else None
        where = sends[first][0] if first is not None else run_end[0]
        gap = f"; records missing before line {gaps[0]}" if gaps else ""
        fail(
            "conservation",
            where,
            f"{len(unterminated)} packets lack a terminal event but run_end reports {run_end[1]['in_flight']}"
            f" (first: pid {first}){gap}",
        )
    stats = {
        "records": line,
        "packets": len(sends),
        "terminated": len(terminals),
        "in_flight": len(unterminated),
        "committed_seqs": len(committed),
    }
    return VerifyReport(not violations, violations, stats)


def read_trace(path: Union[str, Path]) -> list[dict]:
    records = []
    with Path(path).open() as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{i}: {exc}") from exc
    return records


__all__ = [
    "SCHEMA_VERSION",
    "ParseError",
    "RunResult",
    "Scenario",
    "ScenarioError",
    "Simulation",
    "ValidationError",
    "VerdictFail",
    "VerifyReport",
    "Violation",
    "build",
    "bundled_scenarios",
    "dumps_scenario",
    "load_scenario",
    "loads_scenario",
    "read_trace",
    "run_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
    "verify_trace",
]
