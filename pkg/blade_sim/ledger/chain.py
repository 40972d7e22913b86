"""
Chains, block verification and the longest-chain fork rule
"""
import logging
from dataclasses import dataclass
from enum import Enum
from functools import reduce
from typing import Callable, Iterable, List, Mapping, Optional, Tuple

from ..exceptions import ChainError
from ..mlcore import LocalUpdate, ParamVector, aggregate, apply_update, params_digest
from .blocks import Block, contributions_valid, meets_difficulty

logger = logging.getLogger(__name__)


class RejectReason(str, Enum):
    BAD_DIGEST = "BAD_DIGEST"
    BAD_POW = "BAD_POW"
    BAD_LINK = "BAD_LINK"
    MISSING_UPDATE = "MISSING_UPDATE"
    NOT_A_WINNER = "NOT_A_WINNER"
    EXCLUDED_UPDATER = "EXCLUDED_UPDATER"
    BAD_CONTRIBUTIONS = "BAD_CONTRIBUTIONS"
    BAD_AGGREGATE = "BAD_AGGREGATE"
    LOW_ACCURACY = "LOW_ACCURACY"


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    reason: Optional[RejectReason] = None

    @classmethod
    def accept(cls) -> "VerifyResult":
        return cls(True)

    @classmethod
    def reject(cls, reason: RejectReason) -> "VerifyResult":
        return cls(False, reason)


class Chain:
    """Immutable sequence of blocks from genesis to tip"""

    __slots__ = ("_blocks",)

    def __init__(self, blocks: Iterable[Block]):
        blocks = tuple(blocks)
        if not blocks:
            raise ChainError("A chain needs a genesis block", code="BAD_LINK")
        self._blocks: Tuple[Block, ...] = blocks

    @classmethod
    def from_genesis(cls, genesis: Block) -> "Chain":
        return cls((genesis,))

    @property
    def blocks(self) -> Tuple[Block, ...]:
        return self._blocks

    @property
    def genesis(self) -> Block:
        return self._blocks[0]

    @property
    def tip(self) -> Block:
        return self._blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    @property
    def global_params(self) -> ParamVector:
        return self.tip.body.aggregate_params

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self):
        return iter(self._blocks)

    def append(self, block: Block) -> "Chain":
        tip = self.tip
        if block.header.prev_hash != tip.hash or block.height != tip.height + 1:
            raise ChainError(f"Block at height {block.height} does not extend tip "
                             f"{tip.hash.hex()[:12]}", code="BAD_LINK")
        return Chain(self._blocks + (block,))

    def contains(self, block_hash: bytes) -> bool:
        return any(b.hash == block_hash for b in self._blocks)


def verify_block(block: Block, chain: Chain, pool: Mapping[int, LocalUpdate], winners,
                 excluded=frozenset(), mode: str = "recompute",
                 evaluator: Optional[Callable[[ParamVector], float]] = None,
                 tolerance: float = 0.02) -> VerifyResult:
    """Check a received block against the verifier's chain tip and update pool.

    Checks run in a fixed order and the first failure is reported. In
    ``test_set`` mode the bit-exact aggregate check is replaced by scoring the
    block's model against the verifier's own pool aggregate.
    """
    header, body = block.header, block.body

    if header.aggregate_digest != params_digest(body.aggregate_params):
        return VerifyResult.reject(RejectReason.BAD_DIGEST)
    if not meets_difficulty(header.hash(), header.difficulty_bits):
        return VerifyResult.reject(RejectReason.BAD_POW)
    if header.prev_hash != chain.tip.hash or header.height != chain.height + 1:
        return VerifyResult.reject(RejectReason.BAD_LINK)

    listed: List[LocalUpdate] = []
    if mode == "recompute":
        for record in body.updates:
            local = pool.get(record.client_id)
            if local is None or local.digest != record.digest:
                return VerifyResult.reject(RejectReason.MISSING_UPDATE)
            listed.append(local)

    winner_set = set(winners)
    if any(r.client_id not in winner_set for r in body.updates):
        return VerifyResult.reject(RejectReason.NOT_A_WINNER)
    if any(r.client_id in excluded for r in body.updates):
        return VerifyResult.reject(RejectReason.EXCLUDED_UPDATER)
    if not contributions_valid(body):
        return VerifyResult.reject(RejectReason.BAD_CONTRIBUTIONS)

    parent_params = chain.global_params
    if mode == "recompute":
        expected = apply_update(parent_params, aggregate(listed)) if listed else parent_params
        if params_digest(expected) != params_digest(body.aggregate_params):
            return VerifyResult.reject(RejectReason.BAD_AGGREGATE)
    elif mode == "test_set":
        if evaluator is None:
            raise ValueError("test_set verification needs an evaluator")
        own = [u for cid, u in sorted(pool.items()) if cid in winner_set and cid not in excluded]
        reference = apply_update(parent_params, aggregate(own)) if own else parent_params
        if evaluator(body.aggregate_params) < evaluator(reference) - tolerance:
            return VerifyResult.reject(RejectReason.LOW_ACCURACY)
    else:
        raise ValueError(f"Unknown verify mode: {mode}")
    return VerifyResult.accept()


def check_chain(chain: Chain) -> List[str]:
    """Linkage, PoW, digest and contribution problems at every height"""
    problems = []
    blocks = chain.blocks
    genesis = blocks[0]
    if genesis.height != 0 or genesis.header.aggregate_digest != genesis.body.aggregate_digest:
        problems.append("height 0: malformed genesis")
    for parent, block in zip(blocks, blocks[1:]):
        h = block.height
        if block.header.prev_hash != parent.hash or h != parent.height + 1:
            problems.append(f"height {h}: broken link")
        if not meets_difficulty(block.hash, block.header.difficulty_bits):
            problems.append(f"height {h}: insufficient proof of work")
        if block.header.aggregate_digest != block.body.aggregate_digest:
            problems.append(f"height {h}: aggregate digest mismatch")
        if not contributions_valid(block.body):
            problems.append(f"height {h}: contribution weights invalid")
    return problems


def resolve_fork(chain_a: Chain, chain_b: Chain) -> Chain:
    """Longer chain wins; equal length goes to the lexicographically lower tip hash"""
    if chain_a.genesis.hash != chain_b.genesis.hash:
        raise ChainError("Chains do not share a genesis block", code="GENESIS_MISMATCH")
    if chain_a.height != chain_b.height:
        return chain_a if chain_a.height > chain_b.height else chain_b
    return chain_a if chain_a.tip.hash <= chain_b.tip.hash else chain_b


def canonical_chain(chains: Iterable[Chain]) -> Chain:
    return reduce(resolve_fork, chains)
