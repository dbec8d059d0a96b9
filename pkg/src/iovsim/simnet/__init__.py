"""Deterministic network simulation: event loop, adversaries, nodes and metrics."""

from .adversary import AdversarySpec, AdvKind, Verdict, apply_adversary
from .metrics import METRICS, collect_metrics, pair_delivery_ratio, percentile
from .world import EventKind, LinkSpec, Node, Packet, PastEvent, SimEvent, World

__all__ = [
    "AdvKind",
    "AdversarySpec",
    "EventKind",
    "LinkSpec",
    "METRICS",
    "Node",
    "Packet",
    "PastEvent",
    "SimEvent",
    "Verdict",
    "World",
    "apply_adversary",
    "collect_metrics",
    "pair_delivery_ratio",
    "percentile",
]
