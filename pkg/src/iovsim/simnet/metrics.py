"""Run metrics, computed from the trace plus end-of-run node state."""

from __future__ import annotations

from collections import Counter, defaultdict
from typing import Any, Iterable, Mapping

from ..ledger import LedgerState, derive_address
from .adversary import AdvKind
from .nodes import EndpointNode, RelayNode, SimContext, ValidatorNode

METRICS = (
    "sent",
    "delivered",
    "dropped_loss",
    "dropped_adversary",
    "expired",
    "in_flight",
    "requests_submitted",
    "requests_accepted",
    "requests_rejected",
    "requests_abandoned",
    "registrations_accepted",
    "registrations_pending",
    "client_latency_max",
    "sessions_established",
    "handshakes_failed",
    "handshake_rejections",
    "app_sent",
    "fake_identities",
    "fake_sessions",
    "fake_committed_txs",
    "ext_to_sensitive",
    "ext_to_nonsensitive",
    "bus_blocked",
    "records_rejected",
    "filter_accepted",
    "filter_rejected",
    "revoked_inputs_accepted",
    "honest_disagreements",
    "ledger_divergence",
    "committed_height",
    "max_view",
    "view_changes",
    "dbnr_records",
    "dbnr_staleness",
    "adversary_seen",
    "adversary_dropped",
    "grey_hole_seen",
    "grey_hole_dropped",
    "grey_hole_drop_fraction",
    "junk_sent",
    "commits",
    "delivery_ratio",
    "latency_mean",
    "latency_p50",
    "latency_p95",
    "latency_p99",
    "request_latency_p95",
    "adversary_actions",
    "isolation_violations",
)


def percentile(values: list[int], q: float) -> int:
    """Nearest-rank percentile of integer samples (0 for no samples)."""
    if not values:
        return 0
    ordered = sorted(values)
    rank = max(1, -(-len(ordered) * q // 100))
    return ordered[int(rank) - 1]


def pair_delivery_ratio(trace: Iterable[dict], a: str, b: str, channel: str | None = None) -> float | None:
    """Fraction of packets sent between endpoints ``a`` and ``b`` (either way) that were delivered.

    ``None`` when the pair exchanged no packets on ``channel``.
    """
    pids: set[int] = set()
    delivered = 0
    for ev in trace:
        if ev["kind"] == "send" and {ev["node"], ev["dst"]} == {a, b} and (channel is None or ev["channel"] == channel):
            pids.add(ev["pid"])
        elif ev["kind"] == "deliver" and ev["pid"] in pids:
            delivered += 1
    return delivered / len(pids) if pids else None


def _honest_validators(nodes: Mapping[str, Any]) -> list[ValidatorNode]:
    return [n for _, n in sorted(nodes.items()) if isinstance(n, ValidatorNode) and n.honest]


def _max_committed(validators: list[ValidatorNode]) -> LedgerState | None:
    best = None
    for v in validators:
        if best is None or v.replica.ledger.height > best.height:
            best = v.replica.ledger
    return best


def honest_disagreements(validators: list[ValidatorNode]) -> int:
    """Heights at which two honest validators hold different blocks."""
    by_height: dict[int, set[bytes]] = defaultdict(set)
    for v in validators:
        for block in v.replica.blocks:
            by_height[block.height].add(block.hash)
    return sum(1 for hashes in by_height.values() if len(hashes) > 1)


def dbnr_staleness(ctx: SimContext, nodes: Mapping[str, Any], reference: LedgerState) -> tuple[int, int]:
    """Count (resolver, address) pairs whose cached version differs from the committed one."""
    stale = 0
    for _, node in sorted(nodes.items()):
        if isinstance(node, ValidatorNode) and not node.honest:
            continue
        if not isinstance(node, (ValidatorNode, RelayNode)):
            continue
        for addr, rec in reference.dbnr.items():
            cached = node.cache.entries.get(addr)
            if cached is None or cached.version != rec.version:
                stale += 1
    return stale, len(reference.dbnr)


def _adversary_addresses(ctx: SimContext) -> set[bytes]:
    return {derive_address(ctx.crypto, pk) for pk in ctx.adversary_keys}


def _forged(ctx: SimContext, tx: Any, fake: set[bytes]) -> bool:
    """Submitted by a fake identity, or authorised by any adversary-held key."""
    if tx.submitter in fake:
        return True
    return any(ctx.crypto.verify(pk, tx.signing_bytes(), tx.signature) for pk in ctx.adversary_keys)


def collect_metrics(trace: Iterable[dict], ctx: SimContext, nodes: Mapping[str, Any], adversaries: Iterable[Any] = ()) -> dict[str, Any]:
    m: dict[str, Any] = {k: 0 for k in METRICS}
    drops = Counter()
    revoked_at: dict[str, dict[str, int]] = defaultdict(dict)  # node -> source hex -> refresh time
    revoked_sources: set[str] = set()
    owner_of = getattr(ctx.crypto, "owner_of", lambda _: None)
    views: set[int] = set()
    sent_at: dict[int, int] = {}
    latencies: list[int] = []
    request_latencies: list[int] = []
    junk_delivered = 0
    causes: Counter = Counter()
    for ev in trace:
        kind = ev["kind"]
        if kind == "send":
            m["sent"] += 1
            sent_at[ev["pid"]] = ev["t"]
            if ev.get("channel") == "junk":
                m["junk_sent"] += 1
        elif kind == "deliver":
            m["delivered"] += 1
            latencies.append(ev["t"] - sent_at.get(ev["pid"], ev["t"]))
            if ev.get("channel") == "junk":
                junk_delivered += 1
        elif kind == "commit":
            if ev.get("honest"):
                m["commits"] += 1
        elif kind == "adversary":
            m["adversary_actions"] += 1
        elif kind == "drop":
            drops[ev["cause"]] += 1
        elif kind == "expire":
            m["expired"] += 1
        elif kind == "request":
            m["requests_submitted"] += 1
        elif kind == "client_accept":
            m["requests_accepted" if ev["accepted"] else "requests_rejected"] += 1
            m["client_latency_max"] = max(m["client_latency_max"], ev["latency"])
            request_latencies.append(ev["latency"])
            if ev["tag"] == "register" and ev["accepted"]:
                m["registrations_accepted"] += 1
        elif kind == "request_abandoned":
            m["requests_abandoned"] += 1
        elif kind == "handshake":
            phase = ev["phase"]
            if phase == "established":
                if ev["role"] == "initiator":
                    m["sessions_established"] += 1
                if ev["peer_eph_owner"].startswith("adv:"):
                    m["fake_sessions"] += 1
            elif phase == "rejected":
                m["handshake_rejections"] += 1
                causes[f"rejected:{ev['cause']}"] += 1
        elif kind == "handshake_result" and not ev["ok"]:
            m["handshakes_failed"] += 1
            causes[f"failed:{ev['cause']}"] += 1
        elif kind == "app_send":
            m["app_sent"] += 1
        elif kind == "bus":
            if ev["outcome"] == "delivered" and ev["origin"] == "External":
                if ev["sensitivity"] == "SENSITIVE":
                    m["ext_to_sensitive"] += 1
                else:
                    m["ext_to_nonsensitive"] += 1
            elif ev["outcome"] == "blocked":
                m["bus_blocked"] += 1
            elif ev["outcome"] == "rejected":
                m["records_rejected"] += 1
        elif kind == "record" and ev["outcome"] == "rejected":
            m["records_rejected"] += 1
        elif kind == "filter":
            if ev["accepted"]:
                m["filter_accepted"] += 1
                if ev["source"] in revoked_at[ev["node"]] and ev["t"] >= revoked_at[ev["node"]][ev["source"]]:
                    m["revoked_inputs_accepted"] += 1
            else:
                m["filter_rejected"] += 1
        elif kind == "revoked":
            revoked_sources.add(ev["target"])
        elif kind == "ledger_refresh":
            for target in ev.get("revoked", ()):
                revoked_at[ev["node"]].setdefault(target, ev["t"])
        elif kind in ("view_change", "new_view", "enter_view"):
            views.add(ev["view"])
            if kind == "view_change":
                m["view_changes"] += 1
    m["isolation_violations"] = m["ext_to_sensitive"]
    useful_sent = m["sent"] - m["junk_sent"]
    m["delivery_ratio"] = round((m["delivered"] - junk_delivered) / useful_sent, 6) if useful_sent else 1.0
    m["latency_mean"] = round(sum(latencies) / len(latencies), 3) if latencies else 0.0
    m["latency_p50"] = percentile(latencies, 50)
    m["latency_p95"] = percentile(latencies, 95)
    m["latency_p99"] = percentile(latencies, 99)
    m["request_latency_p95"] = percentile(request_latencies, 95)
    m["handshake_causes"] = dict(sorted(causes.items()))
    m["processed_by_node"] = {nid: node.processed for nid, node in sorted(ctx.world.nodes.items())}
    m["dropped_loss"] = drops["loss"]
    m["dropped_adversary"] = drops["adversary"]
    m["in_flight"] = m["sent"] - m["delivered"] - m["dropped_loss"] - m["dropped_adversary"] - m["expired"]

    honest = _honest_validators(nodes)
    m["honest_disagreements"] = honest_disagreements(honest)
    digests = {v.replica.ledger.digest() for v in honest}
    m["ledger_divergence"] = max(len(digests) - 1, 0)
    m["committed_height"] = min((v.replica.ledger.height for v in honest), default=0)
    m["max_view"] = max([v.replica.view for v in honest] + list(views), default=0)
    endpoints = [n for _, n in sorted(nodes.items()) if isinstance(n, EndpointNode)]
    m["registrations_pending"] = sum(1 for e in endpoints if not e.registered)

    reference = _max_committed(honest)
    if reference is not None:
        m["dbnr_staleness"], m["dbnr_records"] = dbnr_staleness(ctx, nodes, reference)
        fake = _adversary_addresses(ctx)
        m["fake_identities"] = sum(
            1 for rec in reference.identities.values() if rec.address in fake or str(owner_of(rec.verify_key) or "").startswith("adv:")
        )
        best = max(honest, key=lambda v: v.replica.ledger.height)
        m["fake_committed_txs"] = sum(
            1 for block in best.replica.blocks for tx in block.txs if _forged(ctx, tx, fake)
        )

    for spec in adversaries:
        seen = ctx.world.adversary_seen.get(spec.name, 0)
        m["adversary_seen"] += seen
        if spec.kind is AdvKind.GREY_HOLE:
            m["grey_hole_seen"] += seen
    dropped_by: Counter = Counter()
    for ev in trace:
        if ev["kind"] == "drop" and ev.get("cause") == "adversary":
            dropped_by[ev.get("adv", "")] += 1
    grey = {s.name for s in adversaries if s.kind is AdvKind.GREY_HOLE}
    m["adversary_dropped"] = sum(dropped_by.values())
    m["grey_hole_dropped"] = sum(c for name, c in dropped_by.items() if name in grey)
    m["grey_hole_drop_fraction"] = round(m["grey_hole_dropped"] / m["grey_hole_seen"], 6) if m["grey_hole_seen"] else 0.0
    return m
