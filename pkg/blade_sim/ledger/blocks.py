"""
Block structure and canonical serialization.

Header layout (little-endian, 108 bytes, version 1):

    H   version
    32s prev_hash
    Q   height
    Q   round
    Q   nonce
    H   difficulty_bits
    32s aggregate_digest
    q   miner_id        (-1 for genesis)
    Q   timestamp_ticks

The header hash is SHA-256 over these bytes; a header is sealed when the hash
has at least ``difficulty_bits`` leading zero bits.
"""
import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from ..mlcore import LocalUpdate, ParamVector, as_param_vector, fedavg_weights, params_digest

HEADER_VERSION = 1
HEADER_FORMAT = "<H32sQQQH32sqQ"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
ZERO_HASH = bytes(32)
GENESIS_MINER = -1


@dataclass(frozen=True)
class BlockHeader:
    prev_hash: bytes
    height: int
    round: int
    nonce: int
    difficulty_bits: int
    aggregate_digest: bytes
    miner_id: int
    timestamp_ticks: int = 0
    version: int = HEADER_VERSION

    def serialize(self) -> bytes:
        return struct.pack(HEADER_FORMAT, self.version, self.prev_hash, self.height, self.round,
                           self.nonce, self.difficulty_bits, self.aggregate_digest,
                           self.miner_id, self.timestamp_ticks)

    @classmethod
    def deserialize(cls, raw: bytes) -> "BlockHeader":
        (version, prev_hash, height, rnd, nonce, bits, digest,
         miner, ts) = struct.unpack(HEADER_FORMAT, raw)
        return cls(prev_hash=prev_hash, height=height, round=rnd, nonce=nonce,
                   difficulty_bits=bits, aggregate_digest=digest, miner_id=miner,
                   timestamp_ticks=ts, version=version)

    def hash(self) -> bytes:
        return hashlib.sha256(self.serialize()).digest()

    def with_nonce(self, nonce: int) -> "BlockHeader":
        return replace(self, nonce=nonce)


def leading_zero_bits(digest: bytes) -> int:
    value = int.from_bytes(digest, "big")
    return len(digest) * 8 - value.bit_length()


def meets_difficulty(digest: bytes, difficulty_bits: int) -> bool:
    return leading_zero_bits(digest) >= difficulty_bits


@dataclass(frozen=True)
class UpdateRecord:
    """What a block body keeps of a local update: metadata plus the params digest"""
    client_id: int
    round: int
    digest: bytes
    sample_size: int
    compute_time: float

    @classmethod
    def from_update(cls, update: LocalUpdate) -> "UpdateRecord":
        return cls(client_id=update.client_id, round=update.round, digest=update.digest,
                   sample_size=update.sample_size, compute_time=update.compute_time)


@dataclass(frozen=True)
class BlockBody:
    updates: Tuple[UpdateRecord, ...]
    aggregate_params: ParamVector
    contributions: Dict[int, float] = field(default_factory=dict)

    @property
    def aggregate_digest(self) -> bytes:
        return params_digest(self.aggregate_params)

    def contributors(self) -> Tuple[int, ...]:
        return tuple(r.client_id for r in self.updates)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    body: BlockBody

    @property
    def hash(self) -> bytes:
        return self.header.hash()

    @property
    def height(self) -> int:
        return self.header.height


def make_body(updates, new_global: ParamVector) -> BlockBody:
    """Body for a round: records in ascending client order plus FedAvg weights"""
    ordered = sorted(updates, key=lambda u: u.client_id)
    weights = fedavg_weights(ordered) if ordered else {}
    return BlockBody(updates=tuple(UpdateRecord.from_update(u) for u in ordered),
                     aggregate_params=new_global, contributions=weights)


def genesis_block(initial_params: ParamVector, task_seed: int = 0) -> Block:
    """Height-0 block holding the initial global model; not sealed"""
    body = BlockBody(updates=(), aggregate_params=as_param_vector(initial_params),
                     contributions={})
    header = BlockHeader(prev_hash=ZERO_HASH, height=0, round=0,
                         nonce=task_seed & 0xFFFFFFFFFFFFFFFF, difficulty_bits=0,
                         aggregate_digest=body.aggregate_digest, miner_id=GENESIS_MINER)
    return Block(header=header, body=body)


def contributions_valid(body: BlockBody, tolerance: float = 1e-9) -> bool:
    if not body.updates:
        return not body.contributions
    expected = {r.client_id: r.sample_size for r in body.updates}
    if set(body.contributions) != set(expected):
        return False
    total = sum(expected.values())
    if abs(sum(body.contributions.values()) - 1.0) > tolerance:
        return False
    return all(abs(body.contributions[cid] - n / total) <= tolerance
               for cid, n in expected.items())


def params_from_bytes(raw: bytes) -> ParamVector:
    return as_param_vector(np.frombuffer(raw, dtype="<f8"))
