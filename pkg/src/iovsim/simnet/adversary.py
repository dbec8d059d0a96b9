"""Adversary models.

On-path adversaries (black hole, grey hole, MITM, tamper) are consulted per
packet through :func:`apply_adversary`, a pure function of the adversary config, the
packet and a seeded stream.  Active adversaries (DoS, DDoS, Sybil,
impersonation) are nodes in their own right; see :mod:`iovsim.simnet.nodes`.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Optional

from ..bisa import HandshakeMessage, Step
from ..encoding import DecodeError


class AdvKind(str, Enum):
    SYBIL = "sybil"
    DOS = "dos"
    DDOS = "ddos"
    BLACK_HOLE = "black_hole"
    GREY_HOLE = "grey_hole"
    IMPERSONATION = "impersonation"
    MITM = "mitm"
    TAMPER = "tamper"


ON_PATH = frozenset({AdvKind.BLACK_HOLE, AdvKind.GREY_HOLE, AdvKind.MITM, AdvKind.TAMPER})
TAMPER_STRATEGIES = ("bitflip", "truncate", "field", "replay")


@dataclass(frozen=True)
class AdversarySpec:
    kind: AdvKind
    name: str = ""
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

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0, 1]")
        if self.window[0] > self.window[1]:
            raise ValueError("window start after end")
        if self.kind is AdvKind.TAMPER and self.strategy not in TAMPER_STRATEGIES:
            raise ValueError(f"unknown tamper strategy {self.strategy!r}")

    def active(self, now: int) -> bool:
        return self.window[0] <= now < self.window[1]


@dataclass(frozen=True)
class Verdict:
    action: str  # forward | drop | replace | duplicate
    bodies: tuple[bytes, ...] = ()
    detail: str = ""


FORWARD = Verdict("forward")


def _flip_bit(body: bytes, rng: random.Random) -> tuple[bytes, str]:
    if not body:
        return body, "empty"
    bit = rng.randrange(len(body) * 8)
    out = bytearray(body)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out), f"bit={bit}"


def _tamper_field(body: bytes, rng: random.Random) -> tuple[bytes, str]:
    try:
        msg = HandshakeMessage.decode(body)
    except DecodeError:
        return _flip_bit(body, rng)
    name = rng.choice(HandshakeMessage.FIELDS)
    value = getattr(msg, name)
    if isinstance(value, Step):
        new: Any = Step(value % len(Step) + 1)
    else:
        raw = bytearray(value) if value else bytearray(b"\x00")
        raw[rng.randrange(len(raw))] ^= 0xFF
        new = bytes(raw)
    return replace(msg, **{name: new}).encode(), f"field={name}"


def apply_adversary(
    spec: AdversarySpec,
    channel: str,
    body: bytes,
    rng: random.Random,
    context: Optional[Mapping[str, Any]] = None,
) -> Verdict:
    """Decide what an on-path adversary does with one packet.

    On-path adversaries only touch channels listed in ``spec.channels`` (all
    channels when empty).
    Active adversary kinds never act on transit traffic.
    """
    if spec.kind not in ON_PATH or (spec.channels and channel not in spec.channels):
        return FORWARD
    if spec.kind is AdvKind.BLACK_HOLE:
        return Verdict("drop", detail="black_hole")
    if spec.kind is AdvKind.GREY_HOLE:
        return Verdict("drop", detail="grey_hole") if rng.random() < spec.drop_prob else FORWARD
    if spec.kind is AdvKind.MITM:
        return _mitm(spec, channel, body, context or {})
    if spec.strategy == "bitflip":
        new, detail = _flip_bit(body, rng)
        return Verdict("replace", (new,), detail)
    if spec.strategy == "truncate":
        return Verdict("replace", (body[:-1],), "truncate")
    if spec.strategy == "field":
        new, detail = _tamper_field(body, rng)
        return Verdict("replace", (new,), detail)
    return Verdict("duplicate", (body, body), "replay")


def _mitm(spec: AdversarySpec, channel: str, body: bytes, context: Mapping[str, Any]) -> Verdict:
    """Substitute the adversary's own ephemeral value into handshakes.

    A MITM that could also re-sign would need a registered key for the
    victim's address; it has none, so the substituted value can only break
    the transcript signature.  Sealed records are forwarded untouched: the
    MITM holds no session key with which to read or rewrite them.
    """
    if channel != "hs":
        return FORWARD
    try:
        msg = HandshakeMessage.decode(body)
    except DecodeError:
        return FORWARD
    own = context.get("mitm_ephemeral", {}).get(spec.name)
    if own is None or msg.ephemeral_pub == own:
        return FORWARD
    return Verdict("replace", (replace(msg, ephemeral_pub=own).encode(),), f"swap_ephemeral:{msg.step.name}")
