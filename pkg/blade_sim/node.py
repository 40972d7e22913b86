"""
Per-client behavior: the round budget, honest and lazy round steps, the
watermark pool scan and the node's view of the chain.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Set

import numpy as np

from .blade_schemas import BudgetConfig, ChainConfig, ModelSpec, PrivacyConfig, WatermarkConfig
from .exceptions import InfeasibleBudgetError
from .ledger.blocks import Block, BlockBody, make_body
from .ledger.chain import (Chain, RejectReason, VerifyResult, canonical_chain, check_chain,
                           verify_block)
from .mlcore import (Dataset, LocalUpdate, ParamVector, aggregate, apply_update,
                     as_param_vector, local_train)
from .privacy import NoiseSchedule, privatize_delta
from .seeding import derive_seed
from .watermark import correlate, decide, embed, sequence_for

logger = logging.getLogger(__name__)


class Behavior(str, Enum):
    HONEST = "honest"
    LAZY = "lazy"


@dataclass(frozen=True)
class NodeConfig:
    client_id: int
    behavior: Behavior = Behavior.HONEST
    capability: float = 1.0
    data_size: int = 0
    cycles_per_sample: float = 1.0
    local_epochs: int = 1
    detection_enabled: bool = False
    disguise_std: float = 0.0
    exaggeration: float = 1.0

    def __post_init__(self):
        if self.capability <= 0:
            raise ValueError("capability f must be > 0")
        if self.local_epochs < 1:
            raise ValueError("local epochs must be >= 1")


# ---------------------------------------------------------------------------
# Compute budget
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoundBudget:
    t_T: float
    t_B: float
    K: int
    T_Sum: float
    tau: int

    @property
    def theta(self) -> float:
        return self.t_T / self.t_B

    @property
    def round_time(self) -> float:
        return self.tau * self.t_T + self.t_B

    @property
    def lazy_effort(self) -> float:
        """Mining effort of a node that skips training, relative to an honest one"""
        return self.round_time / self.t_B

    def check(self) -> None:
        # relative slack for float round-off in tau * t_T
        if self.K * self.round_time > self.T_Sum * (1 + 1e-12):
            raise InfeasibleBudgetError(
                f"K={self.K} rounds of {self.round_time:g} exceed T_Sum={self.T_Sum:g}",
                K=self.K, round_time=self.round_time, T_Sum=self.T_Sum)


def block_time(k: float, c_B: float, N: int, f: float) -> float:
    """Expected time to the first block among N equal miners"""
    return k * c_B / (N * f)


def compute_budget(k: float, c_B: float, N: int, f: float, data_size: int, c_T: float,
                   tau: int, T_Sum: float, rounds: Optional[int] = None) -> RoundBudget:
    """t_B = k c_B / (N f), t_T = |D| c_T / f and the largest K with K(tau t_T + t_B) <= T_Sum.

    An explicit `rounds` is validated against the same law instead.
    """
    for name, value in (("k", k), ("c_B", c_B), ("N", N), ("f", f), ("|D|", data_size),
                        ("c_T", c_T), ("tau", tau), ("T_Sum", T_Sum)):
        if value <= 0:
            raise InfeasibleBudgetError(f"{name} must be positive, got {value}")
    t_B = block_time(k, c_B, N, f)
    t_T = data_size * c_T / f
    per_round = tau * t_T + t_B
    if per_round > T_Sum:
        raise InfeasibleBudgetError(
            f"One round needs {per_round:g} time units but T_Sum is {T_Sum:g}",
            round_time=per_round, T_Sum=T_Sum)
    K = int(math.floor(T_Sum / per_round + 1e-12))
    if rounds is not None:
        K = rounds
    budget = RoundBudget(t_T=t_T, t_B=t_B, K=K, T_Sum=T_Sum, tau=tau)
    budget.check()
    return budget


def resolve_cycles_per_sample(budget: BudgetConfig, chain: ChainConfig, N: int,
                              data_size: int) -> float:
    """c_T from the config: explicit, else from t_T, else from theta * t_B"""
    if budget.c_T is not None:
        return budget.c_T
    if budget.t_T is not None:
        t_T = budget.t_T
    elif budget.theta is not None:
        t_T = budget.theta * block_time(chain.k, chain.c_B, N, budget.f)
    else:
        raise InfeasibleBudgetError("budget needs one of c_T, t_T or theta")
    return t_T * budget.f / data_size


def budget_from_config(budget: BudgetConfig, chain: ChainConfig, N: int, data_size: int,
                       rounds: Optional[int] = None) -> RoundBudget:
    c_T = resolve_cycles_per_sample(budget, chain, N, data_size)
    return compute_budget(chain.k, chain.c_B, N, budget.f, data_size, c_T, budget.tau,
                          budget.T_Sum, rounds=rounds)


def epochs_for_rounds(K: int, t_T: float, t_B: float, T_Sum: float) -> int:
    """Largest tau such that K (tau t_T + t_B) <= T_Sum"""
    if K < 1:
        raise InfeasibleBudgetError("K must be >= 1")
    tau = int(math.floor((T_Sum / K - t_B) / t_T + 1e-12))
    if tau < 1:
        raise InfeasibleBudgetError(f"K={K} leaves no time for a training epoch",
                                    K=K, t_T=t_T, t_B=t_B, T_Sum=T_Sum)
    return tau


def max_rounds(t_T: float, t_B: float, T_Sum: float) -> int:
    """K reachable with a single epoch per round"""
    return int(math.floor(T_Sum / (t_T + t_B) + 1e-12))


# ---------------------------------------------------------------------------
# Round steps
# ---------------------------------------------------------------------------

def pool_scan_for_lazy(own_chips, pool: Mapping[int, LocalUpdate], cfg: WatermarkConfig,
                       own_id: int) -> Set[int]:
    """Ids of pool entries (other than our own) that carry our watermark"""
    accused = set()
    for cid, update in sorted(pool.items()):
        if cid == own_id:
            continue
        use_len = min(len(own_chips), update.params.shape[0])
        statistic, power = correlate(update.params, own_chips, use_len)
        if decide(statistic, power, use_len, cfg):
            accused.add(cid)
    return accused


def confirm_accusation(accuser_id: int, update: LocalUpdate, cfg: WatermarkConfig) -> bool:
    """Recompute the correlation of `update` against the accuser's published sequence"""
    chips = sequence_for(cfg, accuser_id, update.params.shape[0])
    statistic, power = correlate(update.params, chips, len(chips))
    return decide(statistic, power, len(chips), cfg)


class ClientNode:
    """One client: trainer, miner and verifier"""

    def __init__(self, cfg: NodeConfig, data: Dataset, spec: ModelSpec, chain: Chain,
                 task_seed: int):
        self.cfg = cfg
        self.data = data
        self.spec = spec
        self.chain = chain
        self.task_seed = task_seed
        self.pool: Dict[int, LocalUpdate] = {}
        self.own_update: Optional[LocalUpdate] = None
        self.own_chips: Optional[np.ndarray] = None
        self.mining = False
        self.branches: List[Chain] = [chain]
        self.skipped_rounds = 0

    @property
    def client_id(self) -> int:
        return self.cfg.client_id

    @property
    def is_lazy(self) -> bool:
        return self.cfg.behavior == Behavior.LAZY

    def reset_round(self) -> None:
        self.pool = {}
        self.own_update = None
        self.own_chips = None
        self.mining = False
        self.branches = [self.chain]

    def round_step_honest(self, global_params: ParamVector, round: int, lr: float,
                          batch_size: int, t_T: float, privacy: PrivacyConfig,
                          schedule: NoiseSchedule, watermark: WatermarkConfig) -> LocalUpdate:
        """Train, then clip + noise the delta and stamp our watermark on it.

        A DivergenceError propagates; the caller skips this node for the round.
        """
        tau = self.cfg.local_epochs
        seed = derive_seed(self.task_seed, "train", self.client_id, round)
        trained = local_train(global_params, self.data, self.spec, tau, lr, batch_size, seed)
        delta = as_param_vector(trained - global_params)

        noise_seed = derive_seed(self.task_seed, "noise", self.client_id, round)
        delta = privatize_delta(delta, privacy, schedule.scale_for(self.client_id), noise_seed)

        if watermark.enabled:
            self.own_chips = sequence_for(watermark, self.client_id, delta.shape[0])
            delta = embed(delta, self.own_chips, watermark)

        update = LocalUpdate(client_id=self.client_id, round=round, params=delta,
                             sample_size=len(self.data), compute_time=tau * t_T)
        self.own_update = update
        return update

    def round_step_lazy(self, pool: Mapping[int, LocalUpdate], rng: np.random.Generator,
                        round: int) -> Optional[LocalUpdate]:
        """Copy a random pool member's upload, disguise it and claim it as our own"""
        candidates = [u for cid, u in sorted(pool.items()) if cid != self.client_id]
        if not candidates:
            logger.debug(f"Lazy node {self.client_id} found an empty pool in round {round}")
            return None
        victim = candidates[int(rng.integers(0, len(candidates)))]
        params = victim.params
        if self.cfg.disguise_std > 0:
            params = as_param_vector(
                params + rng.normal(0.0, self.cfg.disguise_std, size=params.shape[0]))
        update = LocalUpdate(client_id=self.client_id, round=round, params=params,
                             sample_size=max(1, int(round_half(victim.sample_size
                                                               * self.cfg.exaggeration))),
                             compute_time=victim.compute_time)
        self.own_update = update
        return update

    def receive_update(self, update: LocalUpdate) -> None:
        self.pool[update.client_id] = update

    def scan_pool(self, watermark: WatermarkConfig) -> Set[int]:
        if self.own_chips is None or self.is_lazy or not self.cfg.detection_enabled:
            return set()
        return pool_scan_for_lazy(self.own_chips, self.pool, watermark, self.client_id)

    def build_candidate(self, winners, excluded) -> BlockBody:
        """Aggregate the eligible pool on top of our tip's global model"""
        allowed = set(winners) - set(excluded)
        updates = [u for cid, u in sorted(self.pool.items()) if cid in allowed]
        base = self.chain.global_params
        new_global = apply_update(base, aggregate(updates)) if updates else base
        return make_body(updates, new_global)

    def knows(self, block_hash: bytes) -> bool:
        return any(branch.contains(block_hash) for branch in self.branches)

    def _parent_of(self, block: Block, announced: Chain) -> Optional[Chain]:
        prev = block.header.prev_hash
        for branch in self.branches:
            for i, known in enumerate(branch.blocks):
                if known.hash == prev:
                    return Chain(branch.blocks[:i + 1])
        # unseen ancestry is taken from the announcer once it checks out structurally
        if announced.genesis.hash != self.chain.genesis.hash or check_chain(announced):
            return None
        if len(announced) < 2 or announced.blocks[-2].hash != prev:
            return None
        return Chain(announced.blocks[:-1])

    def receive_block(self, announced: Chain, winners, excluded, mode: str = "recompute",
                      evaluator: Optional[Callable[[ParamVector], float]] = None,
                      tolerance: float = 0.02) -> Optional[VerifyResult]:
        """Verify the announced tip against its parent and keep it as a branch.

        A branch longer than our current view is adopted and stops our mining;
        a same-height competitor is only remembered until `choose_tip`.
        """
        block = announced.tip
        if self.knows(block.hash):
            return None
        parent = self._parent_of(block, announced)
        if parent is None:
            result = VerifyResult.reject(RejectReason.BAD_LINK)
        else:
            result = verify_block(block, parent, self.pool, winners, excluded, mode=mode,
                                  evaluator=evaluator, tolerance=tolerance)
        if not result.accepted:
            logger.debug(f"Node {self.client_id} rejected block {block.hash.hex()[:12]}: "
                         f"{result.reason.value}")
            return result
        branch = parent.append(block)
        self.branches.append(branch)
        if branch.height > self.chain.height:
            self.chain = branch
            self.mining = False
        return result

    def adopt_own(self, block: Block) -> None:
        self.chain = self.chain.append(block)
        self.branches.append(self.chain)
        self.mining = False

    def choose_tip(self) -> Chain:
        """Longest-chain rule over everything verified this round"""
        self.chain = canonical_chain(self.branches)
        self.branches = [self.chain]
        return self.chain


def round_half(x: float) -> float:
    """Round half up (avoids banker's rounding on claimed sizes)"""
    return math.floor(x + 0.5)
