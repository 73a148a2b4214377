"""Count-Min sketches for IP2IP pair counts and their masked private aggregation.

Each cluster member builds a sketch of its own co-occurrence pairs, blinds
it with pairwise masks that cancel across the cluster, and the STA sums the
blinded grids. Only the cluster-wide total is ever visible to the STA.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

logger = logging.getLogger(__name__)

DOMAIN_BITS = 24
_HASH_PRIME = (1 << 31) - 1
_LOW_MASK = (1 << DOMAIN_BITS) - 1
SUBGROUP_SIZE = 100


class AggregationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SketchParams:
    epsilon: float
    delta: float
    M: int
    d: int
    w: int

    @property
    def L(self) -> int:
        return self.d * self.w


def size_sketch(epsilon: float = 0.01, delta: float = 0.01, M: int = 1 << 24) -> SketchParams:
    """w = ceil(e / epsilon), d = ceil(ln(M*M / (2*delta)))."""
    if not (0 < epsilon < 1 and 0 < delta < 1):
        raise ValueError("epsilon and delta must be in (0, 1)")
    if M < 2:
        raise ValueError("M must be at least 2")
    w = math.ceil(math.e / epsilon)
    d = math.ceil(math.log(M * M / (2 * delta)))
    return SketchParams(epsilon, delta, M, d, w)


def encode_pair(a: int, b: int) -> int:
    """Unordered pair of /24 values -> a * 2^24 + b with a < b."""
    if a == b:
        raise ValueError("pair members must differ")
    lo, hi = (a, b) if a < b else (b, a)
    return (lo << DOMAIN_BITS) | hi


def encode_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return (lo << np.uint64(DOMAIN_BITS)) | hi


def _row_seeds(seed: int) -> np.ndarray:
    """Six coefficients (two linear hashes of the item halves) below the hash prime."""
    digest = hashlib.sha256(struct.pack("<Q", seed & (2**64 - 1)) + b"cms-row-seeds").digest()
    vals = [int.from_bytes(digest[i : i + 4], "little") % (_HASH_PRIME - 1) + 1 for i in range(0, 24, 4)]
    return np.array(vals, dtype=np.uint64)


class CountMinSketch:
    """d x w grid of uint64 counters with double hashing across rows.

    Row r uses index (h1(x) + r * h2(x)) mod w, where h1 and h2 are
    independent linear hashes modulo 2^31 - 1 over the two 24-bit halves
    of the item.
    """

    def __init__(self, params: SketchParams, seed: int = 0, counters: np.ndarray | None = None) -> None:
        self.params = params
        self.seed = seed
        self._coef = _row_seeds(seed)
        if counters is None:
            counters = np.zeros((params.d, params.w), dtype=np.uint64)
        counters = np.asarray(counters, dtype=np.uint64)
        if counters.shape != (params.d, params.w):
            raise ValueError("counter grid does not match params")
        self.counters = counters

    def indices(self, items: np.ndarray | Iterable[int]) -> np.ndarray:
        x = np.asarray(items if isinstance(items, np.ndarray) else list(items), dtype=np.uint64).reshape(-1)
        hi = x >> np.uint64(DOMAIN_BITS)
        lo = x & np.uint64(_LOW_MASK)
        a1, b1, c1, a2, b2, c2 = self._coef
        p = np.uint64(_HASH_PRIME)
        w = np.uint64(self.params.w)
        h1 = (a1 * hi + b1 * lo + c1) % p % w
        h2 = (a2 * hi + b2 * lo + c2) % p % w
        rows = np.arange(self.params.d, dtype=np.uint64)[:, None]
        return ((h1[None, :] + rows * h2[None, :]) % w).astype(np.intp)

    def update(self, item: int, count: int = 1) -> None:
        self.update_many(np.array([item], dtype=np.uint64), np.array([count], dtype=np.uint64))

    def update_many(self, items: np.ndarray, counts: np.ndarray | int = 1) -> None:
        items = np.asarray(items, dtype=np.uint64).reshape(-1)
        if items.size == 0:
            return
        counts = np.broadcast_to(np.asarray(counts, dtype=np.uint64), items.shape)
        idx = self.indices(items)
        for r in range(self.params.d):
            np.add.at(self.counters[r], idx[r], counts)

    def query(self, item: int) -> int:
        return int(self.query_many(np.array([item], dtype=np.uint64))[0])

    def query_many(self, items: np.ndarray) -> np.ndarray:
        items = np.asarray(items, dtype=np.uint64).reshape(-1)
        idx = self.indices(items)
        rows = np.arange(self.params.d)[:, None]
        return self.counters[rows, idx].min(axis=0)

    def compatible(self, other: "CountMinSketch") -> bool:
        return self.params == other.params and self.seed == other.seed

    def __add__(self, other: "CountMinSketch") -> "CountMinSketch":
        if not self.compatible(other):
            raise ValueError("sketches use different params or seeds")
        return CountMinSketch(self.params, self.seed, self.counters + other.counters)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CountMinSketch) and self.compatible(other) and np.array_equal(self.counters, other.counters)

    # Wire format: "CMS1" magic, params header, row-major little-endian uint64 counters.
    _HEADER = struct.Struct("<4sddQIIQ")

    def to_bytes(self) -> bytes:
        p = self.params
        head = self._HEADER.pack(b"CMS1", p.epsilon, p.delta, p.M, p.d, p.w, self.seed & (2**64 - 1))
        return head + self.counters.astype("<u8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "CountMinSketch":
        magic, eps, delta, M, d, w, seed = cls._HEADER.unpack_from(data)
        if magic != b"CMS1":
            raise ValueError("not a serialized sketch")
        body = np.frombuffer(data, dtype="<u8", offset=cls._HEADER.size)
        if body.size != d * w:
            raise ValueError("truncated sketch body")
        return cls(SketchParams(eps, delta, M, d, w), seed, body.reshape(d, w).astype(np.uint64))


# -- private aggregation ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class BlindedSketch:
    org: str
    masked: np.ndarray  # uint64 grid, arithmetic mod 2^64


@dataclass
class MaskingParty:
    """One cluster member's key-agreement state for pairwise masks."""

    org: str
    private_key: X25519PrivateKey

    @classmethod
    def create(cls, org: str, rng: np.random.Generator | None = None) -> "MaskingParty":
        if rng is None:
            return cls(org, X25519PrivateKey.generate())
        return cls(org, X25519PrivateKey.from_private_bytes(rng.bytes(32)))

    @property
    def public_bytes(self) -> bytes:
        return self.private_key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    def pair_seed(self, peer: str, peer_public: bytes) -> bytes:
        shared = self.private_key.exchange(X25519PublicKey.from_public_bytes(peer_public))
        lo, hi = sorted((self.org, peer))
        info = b"ip2ip-mask|" + lo.encode() + b"|" + hi.encode()
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info).derive(shared)

    def blind(self, sketch: CountMinSketch, directory: Mapping[str, bytes]) -> BlindedSketch:
        """Add sum of masks shared with higher-named peers, subtract lower-named ones."""
        grid = sketch.counters.copy()
        for peer in sorted(directory):
            if peer == self.org:
                continue
            mask = mask_stream(self.pair_seed(peer, directory[peer]), grid.shape)
            if self.org < peer:
                grid += mask
            else:
                grid -= mask
        return BlindedSketch(self.org, grid)


def mask_stream(seed: bytes, shape: tuple[int, ...]) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=int.from_bytes(seed[:16], "little")))
    return gen.integers(0, 2**64, size=shape, dtype=np.uint64, endpoint=False)


def aggregate_blinded(blinded: Sequence[BlindedSketch], members: Iterable[str]) -> np.ndarray:
    """STA-side sum; aborts unless every member of the group submitted exactly once."""
    expected = set(members)
    got = [b.org for b in blinded]
    if len(got) != len(set(got)):
        raise AggregationError("duplicate submission")
    missing = expected - set(got)
    if missing:
        raise AggregationError(f"missing submissions from {sorted(missing)}; masks would not cancel")
    if set(got) - expected:
        raise AggregationError("submission from a non-member")
    total = np.zeros_like(blinded[0].masked)
    for b in blinded:
        total += b.masked
    return total


def subgroups(orgs: Sequence[str], size: int = SUBGROUP_SIZE) -> list[list[str]]:
    orgs = sorted(orgs)
    return [orgs[i : i + size] for i in range(0, len(orgs), size)]


def private_aggregate(
    sketches: Mapping[str, CountMinSketch],
    rng: np.random.Generator | None = None,
    subgroup_size: int = SUBGROUP_SIZE,
) -> CountMinSketch:
    """Sum the members' sketches so the aggregator only sees blinded grids.

    Members are split into subgroups of at most ``subgroup_size``; masks
    are agreed within a subgroup and cancel in its sum.
    """
    if not sketches:
        raise AggregationError("no sketches to aggregate")
    first = next(iter(sketches.values()))
    if any(not first.compatible(s) for s in sketches.values()):
        raise AggregationError("sketches use different params or seeds")
    if len(sketches) == 1:
        logger.warning("private aggregation over a single member reveals its sketch")
    total = np.zeros_like(first.counters)
    for group in subgroups(list(sketches), subgroup_size):
        parties = {o: MaskingParty.create(o, rng) for o in group}
        directory = {o: p.public_bytes for o, p in parties.items()}
        blinded = [parties[o].blind(sketches[o], directory) for o in group]
        total += aggregate_blinded(blinded, group)
    return CountMinSketch(first.params, first.seed, total)
