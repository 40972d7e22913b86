"""
Smart-contract state machine: publish -> bid -> select -> settle -> finish.

Amounts are integers. Every transition returns a new ContractState, so the
state can be replayed from a chain and compared against the live one.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, Sequence, Tuple

from ..exceptions import ContractError, LedgerInvariantError
from .blocks import Block

logger = logging.getLogger(__name__)

REPUTATION_ACCEPT = 1.0
REPUTATION_REJECT = -1.0
REPUTATION_LAZY = -5.0


class Phase(str, Enum):
    BIDDING = "BIDDING"
    TRAINING = "TRAINING"
    COMPLETED = "COMPLETED"


@dataclass(frozen=True)
class TaskSpec:
    n_required: int
    reward_pool: int
    rounds: int
    data_size: int = 0
    accuracy_target: float = 0.0
    T_Sum: float = 0.0
    deposit: int = 1
    miner_subsidy: int = 0
    aggregating_rule: str = "by-sample-size"


@dataclass(frozen=True)
class Bid:
    client_id: int
    capability: float
    data_size: int
    cost: float
    deposit: int

    @property
    def score(self) -> float:
        return self.capability / self.cost


@dataclass(frozen=True)
class ContractState:
    task: TaskSpec
    phase: Phase = Phase.BIDDING
    escrow: int = 0
    deposits: Dict[int, int] = field(default_factory=dict)
    staked_total: int = 0
    winners: Tuple[int, ...] = ()
    reputation: Dict[int, float] = field(default_factory=dict)
    reward_ledger: Dict[int, int] = field(default_factory=dict)
    refunds: Dict[int, int] = field(default_factory=dict)
    settled_rounds: FrozenSet[int] = frozenset()
    flagged: FrozenSet[int] = frozenset()
    subsidies_minted: int = 0
    slashed: int = 0
    publisher_refund: int = 0

    @property
    def pool(self) -> int:
        return self.task.reward_pool


def _require_phase(state: ContractState, phase: Phase) -> None:
    if state.phase != phase:
        raise ContractError(f"Contract is in phase {state.phase.value}, expected {phase.value}",
                            code="BAD_PHASE")


def _credit(ledger: Dict[int, int], client_id: int, amount: int) -> Dict[int, int]:
    updated = dict(ledger)
    updated[client_id] = updated.get(client_id, 0) + amount
    return updated


def publish_task(task: TaskSpec) -> ContractState:
    """Deploy a task and escrow its reward pool"""
    if task.reward_pool <= 0:
        raise ContractError(f"Reward pool must be positive, got {task.reward_pool}",
                            code="NON_POSITIVE_REWARD")
    if task.rounds < 1:
        raise ContractError("Task needs at least one round", code="BAD_PHASE")
    logger.debug(f"Published task: pool={task.reward_pool} trainers={task.n_required}")
    return ContractState(task=task, escrow=task.reward_pool)


def select_winners(state: ContractState, bids: Sequence[Bid], n_required: int) -> ContractState:
    """Top `n_required` bids by capability/cost (ties to the lower id); losers are refunded"""
    _require_phase(state, Phase.BIDDING)
    by_client: Dict[int, Bid] = {}
    for bid in bids:
        if bid.deposit <= 0:
            raise ContractError(f"Client {bid.client_id} staked no deposit", code="NO_DEPOSIT")
        by_client[bid.client_id] = bid
    if len(by_client) < n_required:
        raise ContractError(f"{len(by_client)} distinct bidders, {n_required} required",
                            code="INSUFFICIENT_BIDDERS",
                            bidders=len(by_client), required=n_required)

    ranked = sorted(by_client.values(), key=lambda b: (-b.score, b.client_id))
    winners = tuple(sorted(b.client_id for b in ranked[:n_required]))
    refunds = dict(state.refunds)
    for bid in ranked[n_required:]:
        refunds[bid.client_id] = refunds.get(bid.client_id, 0) + bid.deposit

    return replace(state, phase=Phase.TRAINING, winners=winners,
                   deposits={cid: by_client[cid].deposit for cid in winners},
                   staked_total=sum(b.deposit for b in by_client.values()),
                   refunds=refunds,
                   reputation={cid: 0.0 for cid in winners})


def round_pool(state: ContractState, round: int) -> int:
    """Equal split of the pool over the task's rounds; the last round takes the remainder"""
    rounds = state.task.rounds
    share = state.task.reward_pool // rounds
    if round == rounds:
        share += state.task.reward_pool % rounds
    return share


def split_payouts(amount: int, sizes: Dict[int, int]) -> Dict[int, int]:
    """floor(amount * n_i / sum n); the rounding remainder goes to the lowest id"""
    total = sum(sizes.values())
    payouts = {cid: amount * n // total for cid, n in sorted(sizes.items())}
    remainder = amount - sum(payouts.values())
    if payouts and remainder:
        lowest = min(payouts)
        payouts[lowest] += remainder
    return payouts


def settle_rewards(state: ContractState, block: Block) -> ContractState:
    """Pay the round's trainers and mint the miner subsidy for a canonical block"""
    _require_phase(state, Phase.TRAINING)
    rnd = block.header.round
    if rnd in state.settled_rounds:
        raise ContractError(f"Round {rnd} already settled", code="DOUBLE_SETTLEMENT")
    if not 1 <= rnd <= state.task.rounds:
        raise ContractError(f"Round {rnd} outside task rounds 1..{state.task.rounds}",
                            code="BAD_PHASE")

    winner_set = set(state.winners)
    sizes = {r.client_id: r.sample_size for r in block.body.updates}
    strangers = sorted(set(sizes) - winner_set)
    if strangers:
        raise ContractError(f"Block pays non-winners {strangers}", code="NOT_A_WINNER")

    ledger = dict(state.reward_ledger)
    paid = 0
    if sizes:
        for cid, amount in split_payouts(round_pool(state, rnd), sizes).items():
            ledger[cid] = ledger.get(cid, 0) + amount
            paid += amount
    if paid > state.escrow:
        raise LedgerInvariantError(f"Round {rnd} pays {paid} from escrow {state.escrow}",
                                   paid=paid, escrow=state.escrow)

    subsidy = state.task.miner_subsidy
    if subsidy:
        ledger[block.header.miner_id] = ledger.get(block.header.miner_id, 0) + subsidy

    return replace(state, escrow=state.escrow - paid, reward_ledger=ledger,
                   settled_rounds=state.settled_rounds | {rnd},
                   subsidies_minted=state.subsidies_minted + subsidy)


def record_verification(state: ContractState, client_id: int, accepted: bool) -> ContractState:
    delta = REPUTATION_ACCEPT if accepted else REPUTATION_REJECT
    reputation = dict(state.reputation)
    reputation[client_id] = reputation.get(client_id, 0.0) + delta
    return replace(state, reputation=reputation)


def flag_lazy(state: ContractState, client_id: int) -> ContractState:
    """Network-wide exclusion of a confirmed plagiarist"""
    if client_id in state.flagged:
        return state
    reputation = dict(state.reputation)
    reputation[client_id] = reputation.get(client_id, 0.0) + REPUTATION_LAZY
    logger.info(f"Client {client_id} flagged as lazy")
    return replace(state, flagged=state.flagged | {client_id}, reputation=reputation)


def finish_task(state: ContractState, slash_lazy: bool = False) -> ContractState:
    """Refund winner deposits (flagged ones forfeit when slashing) and return unspent escrow"""
    _require_phase(state, Phase.TRAINING)
    refunds = dict(state.refunds)
    slashed = state.slashed
    for cid, amount in state.deposits.items():
        if slash_lazy and cid in state.flagged:
            slashed += amount
        else:
            refunds = _credit(refunds, cid, amount)
    return replace(state, phase=Phase.COMPLETED, deposits={}, refunds=refunds,
                   slashed=slashed, publisher_refund=state.publisher_refund + state.escrow,
                   escrow=0)


def audit_contract(state: ContractState) -> Dict[str, Any]:
    """Value conservation: what left the contract against what entered it"""
    rewards = sum(state.reward_ledger.values())
    refunds = sum(state.refunds.values())
    paid_out = rewards + refunds + state.publisher_refund + state.slashed
    paid_in = state.staked_total + state.task.reward_pool + state.subsidies_minted
    held = state.escrow + sum(state.deposits.values())
    return {
        "phase": state.phase.value,
        "rewards": rewards,
        "refunds": refunds,
        "publisher_refund": state.publisher_refund,
        "slashed": state.slashed,
        "subsidies": state.subsidies_minted,
        "staked": state.staked_total,
        "pool": state.task.reward_pool,
        "paid_out": paid_out,
        "paid_in": paid_in,
        "conserved": paid_out + held == paid_in,
        "balanced": state.phase == Phase.COMPLETED and paid_out == paid_in,
        "within_escrow": rewards <= state.task.reward_pool + state.subsidies_minted,
    }


def replay_rewards(state: ContractState, blocks: Iterable[Block]) -> ContractState:
    """Settle every non-genesis block in order on a post-selection state"""
    for block in blocks:
        if block.height == 0:
            continue
        state = settle_rewards(state, block)
    return state
