"""Thin wrappers for the crypto the protocols need: an AEAD for uploads
and query transport, Ed25519 for signing risk payloads, and a KDF for
turning one-time passwords and device secrets into session keys."""

import hashlib

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

NONCE_LEN = 12
TAG_LEN = 16
AEAD_OVERHEAD = NONCE_LEN + TAG_LEN
SIGNATURE_LEN = 64


class AuthenticationError(Exception):
    """Decryption or signature verification failed."""


def derive_key(secret: bytes, context: bytes) -> bytes:
    """Domain-separated 32-byte key from a shared secret."""
    return hashlib.sha256(len(context).to_bytes(2, "big") + context + secret).digest()


def seal(key: bytes, plaintext: bytes, nonce: bytes, aad: bytes = b"") -> bytes:
    """Encrypt-and-MAC the whole payload as a single chunk."""
    if len(nonce) != NONCE_LEN:
        raise ValueError(f"nonce must be {NONCE_LEN} bytes")
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def open_sealed(key: bytes, box: bytes, aad: bytes = b"") -> bytes:
    if len(box) < AEAD_OVERHEAD:
        raise AuthenticationError("ciphertext shorter than AEAD overhead")
    try:
        return AESGCM(key).decrypt(box[:NONCE_LEN], box[NONCE_LEN:], aad)
    except InvalidTag as exc:
        raise AuthenticationError("payload failed authentication") from exc


def gen_signing_key(rng) -> tuple[bytes, bytes]:
    """Deterministic (private, public) signing pair from a seeded generator."""
    priv = Ed25519PrivateKey.from_private_bytes(rng.bytes(32))
    pub = priv.public_key().public_bytes_raw()
    return priv.private_bytes_raw(), pub


def sign(private_bytes: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(private_bytes).sign(message)


def verify(public_bytes: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, message)
        return True
    except InvalidSignature:
        return False
