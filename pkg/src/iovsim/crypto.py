"""Pluggable cryptographic provider.

All protocol code talks to a :class:`CryptoProvider`; nothing imports a
primitive directly.  Two providers ship:

``DeterministicProvider``
    The default for simulation and tests.  Signing and key agreement are
    *ideal functionalities*: every secret is minted by the provider under a
    caller-supplied label (usually the owning node id), and the provider keeps
    the label registry so a test can ask who actually holds the secret behind
    any public value.  Signatures are HMACs under the registered secret, so a
    signature verifies only if it was produced through the provider by the
    label that owns the key.  Everything is reproducible from the seed.

``Ed25519Provider``
    Ed25519 signatures and X25519 agreement from ``cryptography``.  Keys are
    still derived from the seed and label, so runs stay reproducible.

Both use SHA-256, HKDF-SHA256 and ChaCha20-Poly1305.
"""

from __future__ import annotations

import hashlib
import hmac
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_SIZE = 32
TAG_SIZE = 16
NONCE_SIZE = 12


class MalformedKey(ValueError):
    """A public key or agreement value failed provider validation."""


class AuthFail(Exception):
    """Authenticated decryption rejected the record."""


@dataclass(frozen=True)
class SigningKey:
    label: str
    secret: bytes = field(repr=False)
    public: bytes


@dataclass(frozen=True)
class AgreementKey:
    label: str
    secret: bytes = field(repr=False)
    public: bytes


class CryptoProvider(ABC):
    name = "abstract"
    tag_size = TAG_SIZE

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self._minted: Counter[str] = Counter()

    def _secret(self, domain: bytes, label: str) -> bytes:
        n = self._minted[label]
        self._minted[label] += 1
        material = b"|".join([b"iovsim", domain, str(self.seed).encode(), label.encode(), str(n).encode()])
        return hashlib.sha256(material).digest()

    # hashing and key derivation

    def hash(self, data: bytes) -> bytes:
        return hashlib.sha256(data).digest()

    def kdf(self, ikm: bytes, salt: bytes, info: bytes, length: int = KEY_SIZE) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)

    # authenticated encryption

    def seal(self, key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
        return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)

    def open(self, key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
        try:
            return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
        except InvalidTag as exc:
            raise AuthFail("authentication tag mismatch") from exc

    # signatures and key agreement

    @abstractmethod
    def signing_key(self, label: str) -> SigningKey: ...

    @abstractmethod
    def sign(self, key: SigningKey, data: bytes) -> bytes: ...

    @abstractmethod
    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool: ...

    @abstractmethod
    def check_public_key(self, public: bytes) -> None:
        """Raise :class:`MalformedKey` unless ``public`` is a usable verify key."""

    @abstractmethod
    def agreement_key(self, label: str) -> AgreementKey: ...

    @abstractmethod
    def agree(self, key: AgreementKey, peer_public: bytes) -> bytes: ...


class DeterministicProvider(CryptoProvider):
    """Inspectable ideal-functionality provider; see module docstring."""

    name = "deterministic"

    def __init__(self, seed: int = 0) -> None:
        super().__init__(seed)
        self._sign_secrets: dict[bytes, bytes] = {}
        self._agree_secrets: dict[bytes, bytes] = {}
        self._labels: dict[bytes, str] = {}
        self._master = hashlib.sha256(b"iovsim-agreement-master|%d" % seed).digest()

    def signing_key(self, label: str) -> SigningKey:
        secret = self._secret(b"sign", label)
        public = hashlib.sha256(b"vk|" + secret).digest()
        self._sign_secrets[public] = secret
        self._labels[public] = label
        return SigningKey(label, secret, public)

    def sign(self, key: SigningKey, data: bytes) -> bytes:
        return hmac.new(key.secret, data, hashlib.sha256).digest()

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        secret = self._sign_secrets.get(bytes(public))
        if secret is None or len(signature) != 32:
            return False
        return hmac.compare_digest(hmac.new(secret, data, hashlib.sha256).digest(), signature)

    def check_public_key(self, public: bytes) -> None:
        if len(public) != KEY_SIZE:
            raise MalformedKey(f"verify key must be {KEY_SIZE} bytes, got {len(public)}")

    def agreement_key(self, label: str) -> AgreementKey:
        secret = self._secret(b"agree", label)
        public = hashlib.sha256(b"ka|" + secret).digest()
        self._agree_secrets[public] = secret
        self._labels[public] = label
        return AgreementKey(label, secret, public)

    def agree(self, key: AgreementKey, peer_public: bytes) -> bytes:
        if len(peer_public) != KEY_SIZE:
            raise MalformedKey("agreement value must be 32 bytes")
        if self._agree_secrets.get(key.public) != key.secret:
            raise MalformedKey("agreement secret was not issued by this provider")
        # Symmetric in the two public values; reachable only by a holder of one secret.
        lo, hi = sorted((key.public, bytes(peer_public)))
        return hmac.new(self._master, lo + hi, hashlib.sha256).digest()

    def owner_of(self, public: bytes) -> str | None:
        """Label under which the secret behind ``public`` was minted, if any."""
        return self._labels.get(bytes(public))


class Ed25519Provider(CryptoProvider):
    name = "ed25519"

    def __init__(self, seed: int = 0) -> None:
        super().__init__(seed)
        self._labels: dict[bytes, str] = {}

    def signing_key(self, label: str) -> SigningKey:
        secret = self._secret(b"sign", label)
        public = Ed25519PrivateKey.from_private_bytes(secret).public_key().public_bytes_raw()
        self._labels[public] = label
        return SigningKey(label, secret, public)

    def sign(self, key: SigningKey, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(key.secret).sign(data)

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(bytes(public)).verify(bytes(signature), data)
        except (InvalidSignature, ValueError):
            return False
        return True

    def check_public_key(self, public: bytes) -> None:
        try:
            Ed25519PublicKey.from_public_bytes(bytes(public))
        except ValueError as exc:
            raise MalformedKey(str(exc)) from exc

    def agreement_key(self, label: str) -> AgreementKey:
        secret = self._secret(b"agree", label)
        public = X25519PrivateKey.from_private_bytes(secret).public_key().public_bytes_raw()
        self._labels[public] = label
        return AgreementKey(label, secret, public)

    def agree(self, key: AgreementKey, peer_public: bytes) -> bytes:
        try:
            peer = X25519PublicKey.from_public_bytes(bytes(peer_public))
            return X25519PrivateKey.from_private_bytes(key.secret).exchange(peer)
        except ValueError as exc:
            raise MalformedKey(str(exc)) from exc

    def owner_of(self, public: bytes) -> str | None:
        return self._labels.get(bytes(public))


PROVIDERS = {"deterministic": DeterministicProvider, "ed25519": Ed25519Provider}


def make_provider(name: str = "deterministic", seed: int = 0) -> CryptoProvider:
    try:
        return PROVIDERS[name](seed)
    except KeyError:
        raise ValueError(f"unknown crypto provider {name!r}") from None
