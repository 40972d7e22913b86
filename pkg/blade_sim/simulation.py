"""
End-to-end BLADE-FL run: publish, bid, then K rounds of
train -> broadcast -> pool -> (accuse) -> aggregate -> mine -> verify -> update.
"""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd

from .blade_schemas import MetricsReport, RoundRecord, RunSummary, SimConfig
from .exceptions import DivergenceError, InfeasibleBudgetError
from .idx_loader import load_idx
from .ledger.blocks import Block, BlockBody, genesis_block
from .ledger.chain import Chain, canonical_chain
from .ledger.chain_io import audit_chain, dump_chain
from .ledger.contract import (Bid, ContractState, TaskSpec, audit_contract, finish_task,
                              flag_lazy, publish_task, record_verification, replay_rewards,
                              select_winners, settle_rewards)
from .ledger.mining import grind_mining_time, sampled_mining_time, seal, time_in_window
from .mlcore import (Dataset, LocalUpdate, ParamVector, evaluate, init_params,
                     make_partitioned_data, params_digest, partition_dataset)
from .network import KIND_BLOCK, KIND_CONTRACT, KIND_TIMER, KIND_UPDATE, GossipNetwork, Message
from .node import (Behavior, ClientNode, NodeConfig, RoundBudget, budget_from_config,
                   confirm_accusation, round_half)
from .privacy import NoiseSchedule
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

CSV_HEADER = "# blade-sim v1"
NONCE_MASK = (1 << 64) - 1


@dataclass
class RoundOutcome:
    """What one round left behind, kept for audits and oracle checks"""
    round: int
    parent_params: ParamVector
    broadcast: Dict[int, LocalUpdate]
    block: Block
    excluded: Set[int]
    rejections: Dict[str, int] = field(default_factory=dict)
    # training plus weighted mining ticks spent by each node
    compute_ticks: Dict[int, float] = field(default_factory=dict)
    # client ids aggregated into each node's candidate
    contributors: Dict[int, Tuple[int, ...]] = field(default_factory=dict)


def default_bidders(n_clients: int) -> int:
    return n_clients + max(1, n_clients // 4)


def load_data(cfg: SimConfig, n_bidders: int) -> Tuple[List[Dataset], Dataset]:
    data = cfg.data
    seed = cfg.seed if data.seed is None else data.seed
    if data.source == "idx":
        train = load_idx(data.idx_train_images, data.idx_train_labels)
        test = load_idx(data.idx_test_images, data.idx_test_labels)
        clients = partition_dataset(train, n_bidders, data.samples_per_client, data.skew, seed)
        return clients, test
    return make_partitioned_data(seed, n_bidders, data.samples_per_client, data.dims,
                                 data.num_classes, data.skew, data.test_samples, data.class_sep)


def make_bids(cfg: SimConfig, n_bidders: int, data_size: int) -> List[Bid]:
    rng = rng_for(cfg.seed, "bids")
    capabilities = cfg.budget.f * rng.uniform(0.5, 1.5, size=n_bidders)
    costs = rng.uniform(0.5, 1.5, size=n_bidders)
    return [Bid(client_id=i, capability=float(capabilities[i]), data_size=data_size,
                cost=float(costs[i]), deposit=cfg.chain.deposit) for i in range(n_bidders)]


class BladeSimulation:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.nodes: Dict[int, ClientNode] = {}
        self.outcomes: List[RoundOutcome] = []
        self.records: List[RoundRecord] = []
        self.clock: float = 0.0
        self._mined = 0
        self._ready = False

    # -- setup ------------------------------------------------------------

    def setup(self) -> None:
        cfg = self.cfg
        n = cfg.n_clients
        n_bidders = cfg.chain.n_bidders or default_bidders(n)
        data_size = cfg.data.samples_per_client

        self.budget: RoundBudget = budget_from_config(cfg.budget, cfg.chain, n, data_size,
                                                      rounds=cfg.rounds)
        clients, self.test_data = load_data(cfg, n_bidders)
        self.spec = cfg.model_spec(self.test_data.dims, self.test_data.num_classes)

        task = TaskSpec(n_required=n, reward_pool=cfg.chain.reward_pool, rounds=self.budget.K,
                        data_size=data_size, T_Sum=cfg.budget.T_Sum, deposit=cfg.chain.deposit,
                        miner_subsidy=cfg.chain.miner_subsidy)
        self.bids = make_bids(cfg, n_bidders, data_size)
        self.contract: ContractState = select_winners(publish_task(task), self.bids, n)
        self.selected_contract = self.contract
        self.winners: Tuple[int, ...] = self.contract.winners

        n_lazy = int(round_half(cfg.behaviors.lazy_fraction * n))
        lazy_pick = rng_for(cfg.seed, "lazy").choice(np.array(self.winners), size=n_lazy,
                                                     replace=False) if n_lazy else []
        self.lazy_clients: Tuple[int, ...] = tuple(sorted(int(c) for c in lazy_pick))

        params0 = init_params(self.spec, derive_seed(cfg.seed, "init"))
        self.genesis = genesis_block(params0, cfg.seed)
        chain = Chain.from_genesis(self.genesis)

        wm = cfg.watermark
        by_id = {d.client_id: d for d in clients}
        for cid in self.winners:
            node_cfg = NodeConfig(
                client_id=cid,
                behavior=Behavior.LAZY if cid in self.lazy_clients else Behavior.HONEST,
                capability=cfg.budget.f, data_size=data_size,
                cycles_per_sample=self.budget.t_T * cfg.budget.f / data_size,
                local_epochs=self.budget.tau,
                detection_enabled=wm.enabled and wm.detect,
                disguise_std=cfg.behaviors.disguise_std,
                exaggeration=cfg.behaviors.exaggeration)
            self.nodes[cid] = ClientNode(node_cfg, by_id[cid], self.spec, chain, cfg.seed)

        self.train_union = Dataset(np.concatenate([by_id[c].features for c in self.winners]),
                                   np.concatenate([by_id[c].labels for c in self.winners]),
                                   client_id=-2, num_classes=self.test_data.num_classes)
        self.network = GossipNetwork(self.winners, cfg.net, cfg.seed,
                                     record_trace=bool(cfg.output.trace_jsonl))
        self.schedule = NoiseSchedule(cfg.privacy)
        self.canonical = chain
        self._round_layout()
        self._ready = True
        logger.info(f"Task published: N={n} bidders={n_bidders} K={self.budget.K} "
                    f"tau={self.budget.tau} t_T={self.budget.t_T:g} t_B={self.budget.t_B:g} "
                    f"lazy={list(self.lazy_clients)}")

    # -- helpers ----------------------------------------------------------

    def _round_layout(self) -> Tuple[int, int, int]:
        """(slot, training, mining window) lengths of one round, in ticks"""
        net = self.cfg.net
        tpu = net.ticks_per_unit
        slot = int(math.floor(self.budget.round_time * tpu + 1e-9))
        train = int(math.ceil(self.budget.tau * self.budget.t_T * tpu - 1e-9))
        window = slot - train - net.round_deadline_ticks - 2 * net.max_delay
        if window <= 0:
            raise InfeasibleBudgetError(
                f"A round slot of {slot} ticks leaves no mining window after {train} training "
                f"ticks and the gossip deadlines; raise net.ticks_per_unit",
                slot_ticks=slot, train_ticks=train, ticks_per_unit=tpu)
        return slot, train, window

    def _evaluator(self):
        return lambda params: evaluate(params, self.test_data, self.spec)[1]

    def _deliver(self, until: float, deadline: float, accusations: Dict[int, Set[Tuple[int, int]]]):
        for event in self.network.run_until(until):
            self._dispatch(event, deadline, accusations)

    def _dispatch(self, event, deadline, accusations) -> None:
        node = self.nodes[event.dst]
        kind = event.payload.kind
        if kind == KIND_UPDATE:
            if event.deliver_at <= deadline:
                node.receive_update(event.payload.body)
        elif kind == KIND_CONTRACT:
            body = event.payload.body
            accusations.setdefault(event.dst, set()).add((body["accuser"], body["accused"]))

    # -- round ------------------------------------------------------------

    def run_round(self, r: int) -> RoundRecord:
        cfg = self.cfg
        net = cfg.net
        slot, train_ticks, window = self._round_layout()
        start = (r - 1) * slot
        slot_end = r * slot
        train_done = start + train_ticks
        lazy_tick = train_done + net.max_delay
        deadline = train_done + net.round_deadline_ticks
        mining_start = deadline + net.max_delay

        sigma = self.schedule.sigma
        broadcast: Dict[int, LocalUpdate] = {}
        accusations_seen: Dict[int, Set[Tuple[int, int]]] = {}

        for node in self.nodes.values():
            node.reset_round()

        # train on each node's own view of the chain and broadcast
        for cid, node in sorted(self.nodes.items()):
            if node.is_lazy:
                continue
            try:
                update = node.round_step_honest(node.chain.global_params, r, cfg.train.lr,
                                                cfg.train.batch_size, self.budget.t_T,
                                                cfg.privacy, self.schedule, cfg.watermark)
            except DivergenceError as e:
                node.skipped_rounds += 1
                logger.warning(f"Round {r}: node {cid} skipped ({e})")
                continue
            node.receive_update(update)
            broadcast[cid] = update
            self.network.broadcast(cid, Message(KIND_UPDATE, update), train_done)
        honest = [cid for cid, node in self.nodes.items() if not node.is_lazy]
        if honest and not any(cid in broadcast for cid in honest):
            raise DivergenceError(epoch=self.budget.tau - 1)

        # plagiarists copy what has arrived by now
        self._deliver(lazy_tick, deadline, accusations_seen)
        for cid, node in sorted(self.nodes.items()):
            if not node.is_lazy:
                continue
            update = node.round_step_lazy(node.pool, rng_for(cfg.seed, "lazy-step", cid, r), r)
            if update is not None:
                node.receive_update(update)
                broadcast[cid] = update
                self.network.broadcast(cid, Message(KIND_UPDATE, update), lazy_tick)

        # pools close at the deadline; victims accuse
        self._deliver(deadline, deadline, accusations_seen)
        accusations = 0
        for cid, node in sorted(self.nodes.items()):
            for accused in sorted(node.scan_pool(cfg.watermark)):
                accusations += 1
                accusations_seen.setdefault(cid, set()).add((cid, accused))
                body = {"accuser": cid, "accused": accused, "round": r}
                self.network.broadcast(cid, Message(KIND_CONTRACT, body), deadline)
        self._deliver(mining_start, deadline, accusations_seen)
        new_exclusions = self._tally(accusations_seen)

        excluded = set(self.contract.flagged)
        rejections, bodies, stopped = self._mine(r, mining_start, window, slot_end, excluded)
        candidates = {body.aggregate_digest for body in bodies.values()}
        contributors = {cid: body.contributors() for cid, body in bodies.items()}
        self.clock = slot_end / net.ticks_per_unit

        # each node settles its own fork; agreement is read before any global choice
        tips = {node.choose_tip().tip.hash for node in self.nodes.values()}
        self.canonical = canonical_chain(self.nodes[c].chain for c in sorted(self.nodes))
        block = self.canonical.tip
        self.contract = settle_rewards(self.contract, block)
        self.contract = record_verification(self.contract, block.header.miner_id, True)
        for miner, rejected in sorted(rejections.items()):
            if rejected and miner != block.header.miner_id:
                self.contract = record_verification(self.contract, miner, False)

        compute_ticks = {}
        for cid, node in sorted(self.nodes.items()):
            effort = self.budget.lazy_effort if node.is_lazy else 1.0
            trained = 0 if node.is_lazy else train_ticks
            compute_ticks[cid] = trained + (stopped[cid] - mining_start) * effort

        new_global = self.canonical.global_params
        parent_params = self.canonical.blocks[-2].body.aggregate_params
        train_loss, _ = evaluate(new_global, self.train_union, self.spec)
        test_loss, test_acc = evaluate(new_global, self.test_data, self.spec)
        self.schedule.observe(test_acc)

        lazy_sub = [c for c in broadcast if c in self.lazy_clients]
        honest_sub = [c for c in broadcast if c not in self.lazy_clients]
        self.outcomes.append(RoundOutcome(round=r, parent_params=parent_params,
                                          broadcast=broadcast, block=block, excluded=excluded,
                                          rejections={str(k): v for k, v in rejections.items()},
                                          compute_ticks=compute_ticks,
                                          contributors=contributors))
        record = RoundRecord(
            round=r, train_loss=train_loss, test_loss=test_loss, test_accuracy=test_acc,
            chain_height=self.canonical.height, forks_observed=max(0, self._mined - 1),
            tips_agree=len(tips) == 1, aggregates_agree=len(candidates) == 1,
            winning_miner=block.header.miner_id, n_updates=len(block.body.updates),
            accusations=accusations, exclusions=len(new_exclusions),
            lazy_submissions=len(lazy_sub),
            lazy_excluded=sum(1 for c in lazy_sub if c in excluded),
            honest_excluded=sum(1 for c in honest_sub if c in excluded),
            sigma=sigma, global_digest=params_digest(new_global).hex(),
            block_hash=block.hash.hex())
        self.records.append(record)
        logger.info(f"Round {r}/{self.budget.K}: loss={train_loss:.4f} acc={test_acc:.4f} "
                    f"miner={record.winning_miner} updates={record.n_updates} "
                    f"forks={record.forks_observed} excluded={sorted(excluded)}")
        return record

    def _tally(self, seen: Dict[int, Set[Tuple[int, int]]]) -> Set[int]:
        """Exclude an accused client once ceil(N/2) nodes confirm the correlation"""
        quorum = math.ceil(len(self.nodes) / 2)
        claims = sorted({claim for claims in seen.values() for claim in claims})
        newly = set()
        for accuser, accused in claims:
            if accused in self.contract.flagged or accused in newly:
                continue
            confirmers = 0
            for cid, node in sorted(self.nodes.items()):
                if cid == accused or node.is_lazy or not node.cfg.detection_enabled:
                    continue
                if (accuser, accused) not in seen.get(cid, set()):
                    continue
                if cid == accuser:
                    confirmers += 1
                    continue
                update = node.pool.get(accused)
                if update is not None and confirm_accusation(accuser, update, self.cfg.watermark):
                    confirmers += 1
            if confirmers >= quorum:
                newly.add(accused)
                self.contract = flag_lazy(self.contract, accused)
            else:
                logger.warning(f"Accusation {accuser}->{accused} dropped: "
                               f"{confirmers}/{quorum} confirmations")
        return newly

    def _mine(self, r: int, start: int, window: int, slot_end: int, excluded: Set[int]):
        """Race every node's candidate inside the mining window.

        Returns per-miner rejection counts, each node's candidate body and the
        tick at which each node stopped mining.
        """
        cfg = self.cfg
        chain_cfg = cfg.chain
        pending: Dict[int, Block] = {}
        bodies: Dict[int, BlockBody] = {}
        for cid, node in sorted(self.nodes.items()):
            body = node.build_candidate(self.winners, excluded)
            bodies[cid] = body
            effort = self.budget.lazy_effort if node.is_lazy else 1.0
            nonce_start = derive_seed(cfg.seed, "nonce", cid, r) & NONCE_MASK
            sealed = seal(node.chain.tip.header, body, chain_cfg.difficulty_bits, nonce_start,
                          chain_cfg.max_tries, round=r, miner_id=cid, timestamp_ticks=start)
            if chain_cfg.mode == "grind":
                elapsed = grind_mining_time(sealed.tries, node.cfg.capability, chain_cfg.k,
                                            chain_cfg.c_B, chain_cfg.difficulty_bits, effort)
            else:
                elapsed = sampled_mining_time(rng_for(cfg.seed, "mine", cid, r),
                                              node.cfg.capability, chain_cfg.k, chain_cfg.c_B,
                                              effort)
            pending[cid] = Block(header=sealed.header, body=body)
            node.mining = True
            found_at = start + time_in_window(elapsed, self.budget.t_B, window)
            self.network.schedule(cid, found_at, Message(KIND_TIMER, {"round": r}))

        mode = chain_cfg.verify_mode
        evaluator = self._evaluator() if mode == "test_set" else None
        rejections: Dict[int, int] = {}
        stopped = {cid: start + window for cid in self.nodes}
        self._mined = 0
        queue = self.network.queue
        while queue and queue.peek().deliver_at <= slot_end:
            event = queue.pop()
            node = self.nodes[event.dst]
            kind = event.payload.kind
            if kind == KIND_TIMER:
                # a node that already moved to a longer chain lost this race
                if not node.mining:
                    continue
                node.adopt_own(pending[event.dst])
                stopped[event.dst] = event.deliver_at
                self._mined += 1
                self.network.broadcast(event.dst, Message(KIND_BLOCK, node.chain),
                                       event.deliver_at)
            elif kind == KIND_BLOCK:
                was_mining = node.mining
                result = node.receive_block(event.payload.body, self.winners, excluded,
                                            mode=mode, evaluator=evaluator,
                                            tolerance=chain_cfg.verify_tolerance)
                if was_mining and not node.mining:
                    stopped[event.dst] = event.deliver_at
                if result is not None and not result.accepted:
                    miner = event.payload.body.tip.header.miner_id
                    rejections[miner] = rejections.get(miner, 0) + 1
        late = queue.clear()
        if late:
            logger.debug(f"Round {r}: {late} events past the slot end were discarded")
        return rejections, bodies, stopped

    # -- run --------------------------------------------------------------

    def run(self) -> MetricsReport:
        t0 = time.perf_counter()
        if not self._ready:
            self.setup()
        for r in range(1, self.budget.K + 1):
            self.run_round(r)
        self.budget.check()
        self.contract = finish_task(self.contract, slash_lazy=self.cfg.chain.slash_lazy)
        return self._report(time.perf_counter() - t0)

    def _report(self, wall_clock: float) -> MetricsReport:
        ledger = audit_contract(self.contract)
        replayed = replay_rewards(self.selected_contract, self.canonical.blocks)
        ledger["replay_matches"] = replayed.reward_ledger == self.contract.reward_ledger
        ledger["chain_valid"] = audit_chain(self.canonical)["valid"]

        lazy_subs = sum(r.lazy_submissions for r in self.records)
        lazy_excl = sum(r.lazy_excluded for r in self.records)
        honest_subs = sum(len(o.broadcast) for o in self.outcomes) - lazy_subs
        honest_excl = sum(r.honest_excluded for r in self.records)
        blocks_won: Dict[str, int] = {}
        for block in self.canonical.blocks[1:]:
            key = str(block.header.miner_id)
            blocks_won[key] = blocks_won.get(key, 0) + 1
        digests = {params_digest(n.chain.global_params) for n in self.nodes.values()}
        last = self.records[-1]
        summary = RunSummary(
            final_accuracy=last.test_accuracy, final_loss=last.train_loss,
            rounds_executed=len(self.records), K=self.budget.K, tau=self.budget.tau,
            t_T=self.budget.t_T, t_B=self.budget.t_B, theta=self.budget.theta,
            lazy_clients=list(self.lazy_clients),
            total_rewards={str(k): v for k, v in sorted(self.contract.reward_ledger.items())},
            blocks_won=blocks_won,
            detection_tpr=lazy_excl / lazy_subs if lazy_subs else None,
            detection_fpr=honest_excl / honest_subs if honest_subs else None,
            final_digest=last.global_digest, nodes_agree=len(digests) == 1,
            ledger_audit=ledger, wall_clock_seconds=wall_clock)
        return MetricsReport(seed=self.cfg.seed, rounds=self.records, summary=summary)


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def metrics_frame(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in report.rounds],
                        columns=list(RoundRecord.model_fields))


def write_metrics_csv(report: MetricsReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        metrics_frame(report).to_csv(fh, index=False, lineterminator="\n")
    return path


def read_metrics_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_outputs(sim: BladeSimulation, report: MetricsReport, out_dir: Union[str, Path]
                  ) -> Dict[str, str]:
    out = sim.cfg.output
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"metrics_csv": str(write_metrics_csv(report, out_dir / out.metrics_csv))}
    summary_path = out_dir / out.summary_json
    summary_path.write_text(json.dumps({"seed": report.seed,
                                        **report.summary.model_dump()}, indent=2),
                            encoding="utf-8")
    written["summary_json"] = str(summary_path)
    if out.chain_dump:
        written["chain_dump"] = str(dump_chain(sim.canonical, out_dir / out.chain_dump))
    if out.trace_jsonl:
        written["trace_jsonl"] = str(sim.network.export_trace(out_dir / out.trace_jsonl))
    logger.info(f"Outputs written to {out_dir}")
    return written


def run(config: SimConfig, out_dir: Optional[Union[str, Path]] = None) -> MetricsReport:
    """Execute a full seeded run; writes CSV/JSON when an output directory is known"""
    sim = BladeSimulation(config)
    report = sim.run()
    target = out_dir or config.output.dir
    if config.output.write and target:
        write_outputs(sim, report, target)
    return report
