"""
Proof-of-work mining.

``grind`` searches nonces for real; ``sampled`` draws the mining time from the
exponential law of a miner with rate f / (k * c_B) and then seals the header
with a (cheap, low-difficulty) real search so both modes verify identically.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .blocks import Block, BlockBody, BlockHeader, meets_difficulty

logger = logging.getLogger(__name__)

NONCE_SPACE = 1 << 64


@dataclass(frozen=True)
class MiningResult:
    header: BlockHeader
    tries: int


def mine(parent: BlockHeader, body: BlockBody, difficulty_bits: int, nonce_start: int,
         max_tries: int, *, round: int, miner_id: int, timestamp_ticks: int = 0
         ) -> Optional[MiningResult]:
    """Search nonces nonce_start, nonce_start + 1, ... for a sealing header.

    Returns None once `max_tries` nonces fail; callers keep mining from the
    next nonce.
    """
    template = BlockHeader(prev_hash=parent.hash(), height=parent.height + 1, round=round,
                           nonce=0, difficulty_bits=difficulty_bits,
                           aggregate_digest=body.aggregate_digest, miner_id=miner_id,
                           timestamp_ticks=timestamp_ticks)
    for attempt in range(max_tries):
        header = template.with_nonce((nonce_start + attempt) % NONCE_SPACE)
        if meets_difficulty(header.hash(), difficulty_bits):
            return MiningResult(header=header, tries=attempt + 1)
    return None


def seal(parent: BlockHeader, body: BlockBody, difficulty_bits: int, nonce_start: int,
         max_tries: int, *, round: int, miner_id: int, timestamp_ticks: int = 0
         ) -> MiningResult:
    """Keep mining slot after slot until a nonce seals the block"""
    total = 0
    start = nonce_start
    while True:
        result = mine(parent, body, difficulty_bits, start, max_tries, round=round,
                      miner_id=miner_id, timestamp_ticks=timestamp_ticks)
        if result is not None:
            return MiningResult(header=result.header, tries=total + result.tries)
        total += max_tries
        start = (start + max_tries) % NONCE_SPACE
        logger.debug(f"Miner {miner_id} exhausted {total} nonces, continuing")


def sealed_block(result: MiningResult, body: BlockBody) -> Block:
    return Block(header=result.header, body=body)


def sampled_mining_time(rng: np.random.Generator, f: float, k: float, c_B: float,
                        effort: float = 1.0) -> float:
    """Exponential time-to-block for one miner (rate f * effort / (k * c_B))"""
    rate = f * effort / (k * c_B)
    return float(rng.exponential(1.0 / rate))


def grind_mining_time(tries: int, f: float, k: float, c_B: float, difficulty_bits: int,
                      effort: float = 1.0) -> float:
    """Time spent on `tries` hashes, scaled so that 2^bits tries take k * c_B / f"""
    return tries * k * c_B / (f * effort * math.pow(2.0, difficulty_bits))


def time_in_window(elapsed: float, t_B: float, window: float) -> float:
    """Place a race time inside a mining window of fixed length.

    Order between miners is preserved and, for equal miners, the first block
    lands uniformly in [0, window).
    """
    return window * -math.expm1(-elapsed / t_B)
