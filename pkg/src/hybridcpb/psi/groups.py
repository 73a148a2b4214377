"""Prime-order groups for the DH-style PSI protocols.

``Ed25519Group`` works in the prime-order subgroup of edwards25519 through
libsodium; hashing to the group uses the Elligator 2 map, whose output is
already cofactor-cleared. ``X25519Group`` is the same curve in Montgomery
x-only form through OpenSSL: faster, commutative, but scalars are clamped so
it has no inverses and only serves protocols that never unblind.
``ModPGroup`` is the quadratic-residue subgroup of the 2048-bit MODP safe
prime, for benchmark parity with modular-arithmetic implementations.
"""

from __future__ import annotations

import hashlib
import random
import secrets

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from nacl import bindings as sodium
from nacl.exceptions import RuntimeError as SodiumError

try:
    import gmpy2

    def _powmod(b: int, e: int, m: int) -> int:
        return int(gmpy2.powmod(b, e, m))

    def _is_qr(x: int, p: int) -> bool:
        return gmpy2.jacobi(x, p) == 1

except ImportError:  # pragma: no cover - gmpy2 is optional

    def _powmod(b: int, e: int, m: int) -> int:
        return pow(b, e, m)

    def _is_qr(x: int, p: int) -> bool:
        return pow(x, (p - 1) // 2, p) == 1


class GroupError(ValueError):
    """Invalid or non-canonical group element encoding."""


class Group:
    group_id: int
    invertible = True
    order: int
    element_len: int
    name: str

    def hash_to_group(self, data: bytes) -> bytes:
        raise NotImplementedError

    def exp(self, element: bytes, scalar: int) -> bytes:
        raise NotImplementedError

    def validate(self, element: bytes) -> bytes:
        raise NotImplementedError

    def random_scalar(self, rng: random.Random | None = None) -> int:
        if rng is None:
            return secrets.randbelow(self.order - 1) + 1
        return rng.randrange(1, self.order)

    def inverse(self, scalar: int) -> int:
        return pow(scalar, -1, self.order)


class Ed25519Group(Group):
    group_id = 1
    order = 2**252 + 27742317777372353535851937790883648493
    element_len = 32
    name = "ed25519"

    def hash_to_group(self, data: bytes) -> bytes:
        digest = hashlib.sha512(b"hybridcpb-h2g|" + data).digest()
        return sodium.crypto_core_ed25519_from_uniform(digest[:32])

    def exp(self, element: bytes, scalar: int) -> bytes:
        try:
            return sodium.crypto_scalarmult_ed25519_noclamp((scalar % self.order).to_bytes(32, "little"), element)
        except SodiumError as exc:
            raise GroupError("scalar multiplication failed") from exc

    def validate(self, element: bytes) -> bytes:
        # Full subgroup membership is checked by exp(); only framing here.
        if len(element) != self.element_len:
            raise GroupError("wrong element length")
        return element

    def is_member(self, element: bytes) -> bool:
        return len(element) == self.element_len and bool(sodium.crypto_core_ed25519_is_valid_point(element))


_P25519 = 2**255 - 19


class X25519Group(Group):
    group_id = 3
    order = Ed25519Group.order
    element_len = 32
    name = "x25519"
    invertible = False

    def __init__(self) -> None:
        self._key_cache: tuple[int, X25519PrivateKey] | None = None

    def hash_to_group(self, data: bytes) -> bytes:
        point = Ed25519Group.hash_to_group(self, data)  # type: ignore[arg-type]
        y = int.from_bytes(point, "little") & ((1 << 255) - 1)
        u = (1 + y) * pow(1 - y, -1, _P25519) % _P25519
        return u.to_bytes(32, "little")

    def random_scalar(self, rng: random.Random | None = None) -> int:
        return rng.getrandbits(256) if rng is not None else secrets.randbits(256)

    def exp(self, element: bytes, scalar: int) -> bytes:
        if self._key_cache is None or self._key_cache[0] != scalar:
            self._key_cache = (scalar, X25519PrivateKey.from_private_bytes(scalar.to_bytes(32, "little")))
        try:
            return self._key_cache[1].exchange(X25519PublicKey.from_public_bytes(element))
        except ValueError as exc:
            raise GroupError("invalid x25519 element") from exc

    def validate(self, element: bytes) -> bytes:
        if len(element) != self.element_len:
            raise GroupError("wrong element length")
        return element

    def inverse(self, scalar: int) -> int:
        raise GroupError("x25519 scalars are clamped and have no inverse")


# RFC 3526 group 14 (2048-bit MODP); p = 2q + 1 with q prime.
_MODP_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)


class ModPGroup(Group):
    group_id = 2
    name = "modp2048"

    def __init__(self, p: int = _MODP_2048, exponent_bits: int | None = 256) -> None:
        self.p = p
        self.order = (p - 1) // 2
        self.element_len = (p.bit_length() + 7) // 8
        self.exponent_bits = exponent_bits

    def random_scalar(self, rng: random.Random | None = None) -> int:
        if self.exponent_bits is None:
            return super().random_scalar(rng)
        bits = self.exponent_bits
        s = rng.getrandbits(bits) if rng is not None else secrets.randbits(bits)
        return s | 1 | (1 << (bits - 1))

    def hash_to_group(self, data: bytes) -> bytes:
        out = b""
        counter = 0
        while len(out) < self.element_len + 16:
            out += hashlib.sha512(counter.to_bytes(4, "big") + b"hybridcpb-h2g|" + data).digest()
            counter += 1
        x = int.from_bytes(out, "big") % self.p
        x = x if x > 1 else 2
        return _powmod(x, 2, self.p).to_bytes(self.element_len, "big")

    def exp(self, element: bytes, scalar: int) -> bytes:
        return _powmod(int.from_bytes(element, "big"), scalar % self.order, self.p).to_bytes(self.element_len, "big")

    def validate(self, element: bytes) -> bytes:
        if len(element) != self.element_len:
            raise GroupError("wrong element length")
        x = int.from_bytes(element, "big")
        if not 1 < x < self.p - 1 or not _is_qr(x, self.p):
            raise GroupError("not a quadratic residue mod p")
        return element


GROUPS: dict[int, type[Group]] = {g.group_id: g for g in (Ed25519Group, ModPGroup, X25519Group)}


def group_by_name(name: str) -> Group:
    if name in ("ed25519", "ec"):
        return Ed25519Group()
    if name == "x25519":
        return X25519Group()
    if name in ("modp2048", "modp", "modular"):
        return ModPGroup()
    raise ValueError(f"unknown group {name!r}")


def group_by_id(group_id: int) -> Group:
    try:
        return GROUPS[group_id]()
    except KeyError:
        raise GroupError(f"unknown group id {group_id}") from None
