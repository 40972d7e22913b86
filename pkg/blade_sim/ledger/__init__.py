"""
Blocks, proof-of-work mining, chain verification and the task contract
"""
from .blocks import (Block, BlockBody, BlockHeader, UpdateRecord, genesis_block,
                     leading_zero_bits, make_body, meets_difficulty)
from .chain import Chain, RejectReason, VerifyResult, canonical_chain, resolve_fork, verify_block
from .chain_io import audit_chain, chain_to_json, dump_chain, load_chain
from .contract import (Bid, ContractState, Phase, TaskSpec, audit_contract, finish_task,
                       flag_lazy, publish_task, record_verification, replay_rewards,
                       select_winners, settle_rewards)
from .mining import MiningResult, mine, seal

__all__ = [
    "Block", "BlockBody", "BlockHeader", "UpdateRecord", "genesis_block", "leading_zero_bits",
    "make_body", "meets_difficulty", "Chain", "RejectReason", "VerifyResult",
    "canonical_chain", "resolve_fork", "verify_block", "audit_chain", "chain_to_json",
    "dump_chain", "load_chain", "Bid", "ContractState", "Phase", "TaskSpec",
    "audit_contract", "finish_task", "flag_lazy", "publish_task", "record_verification",
    "replay_rewards", "select_winners", "settle_rewards", "MiningResult", "mine", "seal",
]
