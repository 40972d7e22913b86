"""
Chain dump/load and audit.

Binary dump (little-endian):

    4s  magic "BLDC"
    H   format version (1)
    I   block count
    per block: I length, then the block bytes

Block bytes: the 108-byte header, I record count, records as
``q client_id, Q round, 32s digest, Q sample_size, d compute_time``,
I parameter count, the parameters as float64, I contribution count and
``q client_id, d weight`` pairs.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from ..exceptions import ChainError
from .blocks import (HEADER_SIZE, Block, BlockBody, BlockHeader, UpdateRecord,
                     params_from_bytes)
from .chain import Chain, check_chain

logger = logging.getLogger(__name__)

MAGIC = b"BLDC"
FORMAT_VERSION = 1
_RECORD = struct.Struct("<qQ32sQd")
_CONTRIB = struct.Struct("<qd")
_U32 = struct.Struct("<I")


def serialize_block(block: Block) -> bytes:
    body = block.body
    parts = [block.header.serialize(), _U32.pack(len(body.updates))]
    for r in body.updates:
        parts.append(_RECORD.pack(r.client_id, r.round, r.digest, r.sample_size, r.compute_time))
    params = np.asarray(body.aggregate_params, dtype="<f8")
    parts.append(_U32.pack(params.shape[0]))
    parts.append(params.tobytes())
    parts.append(_U32.pack(len(body.contributions)))
    for cid, weight in sorted(body.contributions.items()):
        parts.append(_CONTRIB.pack(cid, weight))
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ChainError("Chain dump is truncated", code="BAD_CHAIN_FILE")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def deserialize_block(raw: bytes) -> Block:
    reader = _Reader(raw)
    header = BlockHeader.deserialize(reader.take(HEADER_SIZE))
    (n_records,) = reader.unpack(_U32)
    records = []
    for _ in range(n_records):
        cid, rnd, digest, size, compute = reader.unpack(_RECORD)
        records.append(UpdateRecord(client_id=cid, round=rnd, digest=digest,
                                    sample_size=size, compute_time=compute))
    (dim,) = reader.unpack(_U32)
    params = params_from_bytes(reader.take(dim * 8))
    (n_contrib,) = reader.unpack(_U32)
    contributions = {}
    for _ in range(n_contrib):
        cid, weight = reader.unpack(_CONTRIB)
        contributions[cid] = weight
    if reader.pos != len(raw):
        raise ChainError("Trailing bytes after block", code="BAD_CHAIN_FILE")
    return Block(header=header, body=BlockBody(updates=tuple(records), aggregate_params=params,
                                               contributions=contributions))


def dump_chain(chain: Chain, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", FORMAT_VERSION, len(chain)))
        for block in chain:
            raw = serialize_block(block)
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)
    logger.info(f"Wrote {len(chain)} blocks to {path}")
    return path


def load_chain(path: Union[str, Path]) -> Chain:
    path = Path(path)
    if not path.exists():
        raise ChainError(f"Chain dump not found: {path}", code="BAD_CHAIN_FILE")
    reader = _Reader(path.read_bytes())
    if reader.take(4) != MAGIC:
        raise ChainError(f"{path} is not a chain dump", code="BAD_CHAIN_FILE")
    version, count = reader.unpack(struct.Struct("<HI"))
    if version != FORMAT_VERSION:
        raise ChainError(f"Unsupported chain dump version {version}", code="BAD_CHAIN_FILE")
    blocks = []
    for _ in range(count):
        (length,) = reader.unpack(_U32)
        blocks.append(deserialize_block(reader.take(length)))
    if reader.pos != len(reader.raw):
        raise ChainError("Trailing bytes after last block", code="BAD_CHAIN_FILE")
    return Chain(blocks)


def block_to_dict(block: Block) -> Dict[str, Any]:
    h = block.header
    return {
        "hash": block.hash.hex(),
        "height": h.height,
        "round": h.round,
        "prev_hash": h.prev_hash.hex(),
        "nonce": h.nonce,
        "difficulty_bits": h.difficulty_bits,
        "aggregate_digest": h.aggregate_digest.hex(),
        "miner_id": h.miner_id,
        "timestamp_ticks": h.timestamp_ticks,
        "updates": [{"client_id": r.client_id, "round": r.round, "digest": r.digest.hex(),
                     "sample_size": r.sample_size, "compute_time": r.compute_time}
                    for r in block.body.updates],
        "contributions": {str(k): v for k, v in sorted(block.body.contributions.items())},
        "param_count": int(block.body.aggregate_params.shape[0]),
    }


def chain_to_json(chain: Chain, path: Union[str, Path] = None) -> str:
    """Human-readable export; parameters are summarized by digest and size"""
    text = json.dumps({"height": chain.height,
                       "blocks": [block_to_dict(b) for b in chain]}, indent=2)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def audit_chain(chain: Chain) -> Dict[str, Any]:
    """Full re-verification pass: linkage, PoW, digests and weights at every height"""
    problems: List[str] = check_chain(chain)
    miners: Dict[str, int] = {}
    for block in chain.blocks[1:]:
        key = str(block.header.miner_id)
        miners[key] = miners.get(key, 0) + 1
    return {
        "valid": not problems,
        "height": chain.height,
        "blocks": len(chain),
        "tip": chain.tip.hash.hex(),
        "problems": problems,
        "blocks_by_miner": miners,
    }
