import copy
import json
from pathlib import Path

import numpy as np
import pytest

from blade_sim.blade_config import build_sim_config, load_sim_config
from blade_sim.exceptions import DivergenceError, InfeasibleBudgetError
from blade_sim.ledger.chain_io import audit_chain, load_chain
from blade_sim.mlcore import aggregate, apply_update
from blade_sim.simulation import (CSV_HEADER, BladeSimulation, default_bidders,
                                  read_metrics_csv, run, write_metrics_csv)


def _run(doc, **sections):
    for key, value in sections.items():
        doc[key] = {**doc.get(key, {}), **value} if isinstance(value, dict) else value
    sim = BladeSimulation(build_sim_config(doc))
    return sim, sim.run()


class TestHonestRun:
    def test_runs_every_budgeted_round(self, small_doc):
        sim, report = _run(small_doc)
        s = report.summary
        assert s.K == 4 and s.rounds_executed == 4
        assert s.K * (s.tau * s.t_T + s.t_B) <= 120.0
        assert [r.round for r in report.rounds] == [1, 2, 3, 4]
        assert [r.chain_height for r in report.rounds] == [1, 2, 3, 4]
        assert s.nodes_agree
        assert s.detection_tpr is None

    def test_decentralized_aggregate_equals_oracle(self, small_doc):
        sim, report = _run(small_doc)
        for outcome, record in zip(sim.outcomes, report.rounds):
            assert record.tips_agree and record.aggregates_agree
            assert record.n_updates == 4
            oracle = apply_update(outcome.parent_params,
                                  aggregate(list(outcome.broadcast.values())))
            np.testing.assert_array_equal(outcome.block.body.aggregate_params, oracle)

    def test_ledger_audit(self, small_doc):
        sim, report = _run(small_doc)
        audit = report.summary.ledger_audit
        assert audit["conserved"] and audit["balanced"]
        assert audit["replay_matches"] and audit["chain_valid"]
        assert sum(report.summary.blocks_won.values()) == 4
        assert sum(report.summary.total_rewards.values()) == 1000 + 4

    def test_learning_improves_accuracy(self, small_doc):
        _, report = _run(small_doc)
        assert report.rounds[-1].test_accuracy > 0.4
        assert report.rounds[-1].train_loss < report.rounds[0].train_loss + 1e-9


class TestDeterminism:
    def test_same_seed_same_csv(self, small_doc, tmp_path):
        _, a = _run(dict(small_doc))
        _, b = _run(dict(small_doc))
        pa = write_metrics_csv(a, tmp_path / "a.csv")
        pb = write_metrics_csv(b, tmp_path / "b.csv")
        assert pa.read_bytes() == pb.read_bytes()
        assert pa.read_text().splitlines()[0] == CSV_HEADER

    def test_other_seed_differs(self, small_doc):
        _, a = _run(dict(small_doc))
        _, b = _run(dict(small_doc, seed=8))
        assert a.summary.final_digest != b.summary.final_digest


class TestSetup:
    def test_default_bidders(self):
        assert default_bidders(20) == 25
        assert default_bidders(2) == 3

    def test_thirty_percent_lazy_of_twenty(self, small_doc):
        small_doc.update(n_clients=20)
        small_doc["behaviors"] = {"lazy_fraction": 0.3}
        sim = BladeSimulation(build_sim_config(small_doc))
        sim.setup()
        assert len(sim.lazy_clients) == 6
        assert set(sim.lazy_clients) <= set(sim.winners)
        assert len(sim.winners) == 20

    def test_infeasible_budget(self, small_doc):
        small_doc["budget"]["T_Sum"] = 10.0
        with pytest.raises(InfeasibleBudgetError):
            BladeSimulation(build_sim_config(small_doc)).run()

    def test_divergence_aborts(self, small_doc):
        cfg = build_sim_config(small_doc, ["train.lr=1e308"])
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"lr": float("inf")})})
        with pytest.raises(DivergenceError):
            BladeSimulation(cfg).run()


class TestLazyClients:
    def _doc(self, small_doc, detect):
        small_doc.update(n_clients=6)
        small_doc["data"].update(dims=200)
        # t_B = 40 / 6, t_T = 2 t_B -> K = 120 // 20 = 6; keep it short
        small_doc["rounds"] = 3
        small_doc["behaviors"] = {"lazy_fraction": 0.34}
        small_doc["watermark"] = {"enabled": True, "detect": detect, "snr_db": 6.0}
        return small_doc

    def test_copies_are_detected_and_excluded(self, small_doc):
        sim, report = _run(self._doc(small_doc, detect=True))
        s = report.summary
        assert len(s.lazy_clients) == 2
        assert s.detection_tpr == 1.0
        assert s.detection_fpr == 0.0
        assert report.rounds[0].exclusions == 2
        for outcome in sim.outcomes[1:]:
            listed = {r.client_id for r in outcome.block.body.updates}
            assert not listed & set(s.lazy_clients)
        assert sim.contract.flagged == frozenset(s.lazy_clients)

    def test_without_detection_copies_get_in(self, small_doc):
        sim, report = _run(self._doc(small_doc, detect=False))
        s = report.summary
        assert s.detection_tpr == 0.0
        assert all(r.accusations == 0 for r in report.rounds)
        assert all(r.n_updates == 6 for r in report.rounds)


class TestModes:
    def test_grind_mining(self, small_doc):
        _, report = _run(small_doc, chain={"mode": "grind", "difficulty_bits": 4})
        assert report.summary.ledger_audit["chain_valid"]

    def test_test_set_verification(self, small_doc):
        _, report = _run(small_doc, chain={"verify_mode": "test_set"})
        assert report.summary.rounds_executed == 4
        assert report.summary.nodes_agree

    def test_privacy_sigma_never_increases(self, small_doc):
        _, report = _run(small_doc, privacy={"enabled": True, "epsilon": 20.0,
                                              "decay": {"kind": "adaptive", "rate": 0.5,
                                                        "patience": 1}})
        sigmas = [r.sigma for r in report.rounds]
        assert sigmas[0] > 0
        assert all(a >= b for a, b in zip(sigmas, sigmas[1:]))

    def test_lossy_network_completes(self, small_doc):
        sim, report = _run(small_doc, net={"drop_prob": 0.2, "jitter_ticks": 1})
        assert report.summary.rounds_executed == 4
        assert report.summary.ledger_audit["chain_valid"]
        assert sim.canonical.height == 4

    def test_heavy_loss_splits_node_views(self, small_doc):
        sim, report = _run(small_doc, net={"drop_prob": 0.95})
        assert not all(r.tips_agree for r in report.rounds)
        assert not all(r.aggregates_agree for r in report.rounds)
        assert len({n.chain.tip.hash for n in sim.nodes.values()}) > 1


def test_run_writes_outputs(small_doc, tmp_path):
    small_doc["output"] = {"write": True, "trace_jsonl": "trace.jsonl"}
    report = run(build_sim_config(small_doc), out_dir=tmp_path)
    frame = read_metrics_csv(tmp_path / "metrics.csv")
    assert list(frame["round"]) == [1, 2, 3, 4]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seed"] == report.seed
    assert summary["final_digest"] == report.summary.final_digest
    chain = load_chain(tmp_path / "chain.bin")
    assert audit_chain(chain)["valid"]
    assert chain.height == 4
    assert (tmp_path / "trace.jsonl").read_text().strip()


CONFIGS = Path(__file__).resolve().parents[1] / "configs"


class TestTimeBudget:
    def test_simulated_clock_stays_within_total_budget(self):
        cfg = load_sim_config(CONFIGS / "default.json", ["output.write=false"])
        sim = BladeSimulation(cfg)
        report = sim.run()
        s = report.summary
        assert s.K == 14
        assert sim.clock <= cfg.budget.T_Sum
        assert sim.clock <= s.K * (s.tau * s.t_T + s.t_B) + 1e-9

    def test_clock_advances_one_slot_per_round(self, small_doc):
        sim = BladeSimulation(build_sim_config(small_doc))
        sim.setup()
        for r in (1, 2):
            sim.run_round(r)
            assert sim.clock == pytest.approx(30.0 * r)

    def test_per_node_compute_fits_the_round(self, small_doc):
        small_doc.update(n_clients=6, rounds=3)
        small_doc["behaviors"] = {"lazy_fraction": 0.34}
        sim, report = _run(small_doc)
        s = report.summary
        limit = (s.tau * s.t_T + s.t_B) * sim.cfg.net.ticks_per_unit
        for outcome in sim.outcomes:
            assert set(outcome.compute_ticks) == set(sim.winners)
            assert all(0 <= ticks <= limit for ticks in outcome.compute_ticks.values())

    def test_blocks_are_stamped_inside_their_slot(self, small_doc):
        sim, report = _run(small_doc)
        slot = 30 * sim.cfg.net.ticks_per_unit
        for block in sim.canonical.blocks[1:]:
            r = block.header.round
            assert (r - 1) * slot < block.header.timestamp_ticks < r * slot

    def test_ticks_too_coarse_for_the_round(self, small_doc):
        small_doc["net"] = {"ticks_per_unit": 1, "round_deadline_ticks": 8}
        with pytest.raises(InfeasibleBudgetError) as err:
            BladeSimulation(build_sim_config(small_doc)).run()
        assert "ticks_per_unit" in str(err.value)


class TestConsensus:
    def test_oracle_equivalence_across_seeds(self, small_doc):
        for seed in range(10):
            sim, report = _run(dict(small_doc, seed=seed))
            for outcome, record in zip(sim.outcomes, report.rounds):
                assert record.tips_agree and record.aggregates_agree
                oracle = apply_update(outcome.parent_params,
                                      aggregate(list(outcome.broadcast.values())))
                np.testing.assert_array_equal(outcome.block.body.aggregate_params, oracle)
            assert report.summary.nodes_agree

    def test_ledger_conserved_across_seeds(self, small_doc):
        small_doc["behaviors"] = {"lazy_fraction": 0.25}
        for seed in range(20):
            _, report = _run(dict(small_doc, seed=seed))
            audit = report.summary.ledger_audit
            assert audit["conserved"] and audit["balanced"], seed
            assert audit["replay_matches"] and audit["chain_valid"], seed

    @pytest.mark.slow
    def test_twenty_honest_nodes_agree_for_fifty_rounds(self):
        doc = {
            "n_clients": 20,
            "data": {"samples_per_client": 20, "dims": 10, "num_classes": 4,
                     "test_samples": 100, "class_sep": 1.0},
            # t_B = t_T = 2 -> K = 200 // 4 = 50
            "budget": {"T_Sum": 200.0, "tau": 1, "theta": 1.0},
            "chain": {"mode": "sampled"},
            "output": {"write": False},
        }
        for seed in range(20):
            _, report = _run(dict(doc, seed=seed))
            assert report.summary.K == 50
            assert all(r.tips_agree for r in report.rounds), seed
            assert all(r.aggregates_agree for r in report.rounds), seed
            assert report.summary.nodes_agree, seed


class TestLazyExclusion:
    def _doc(self, small_doc, detect):
        small_doc.update(n_clients=6, rounds=3)
        small_doc["data"].update(dims=200)
        small_doc["behaviors"] = {"lazy_fraction": 0.34}
        small_doc["watermark"] = {"enabled": True, "detect": detect, "snr_db": 6.0}
        return small_doc

    def test_detection_never_costs_honest_contributions(self, small_doc):
        on, on_report = _run(self._doc(copy.deepcopy(small_doc), detect=True))
        off, _ = _run(self._doc(small_doc, detect=False))
        lazy = set(on_report.summary.lazy_clients)
        for with_detection, without in zip(on.outcomes, off.outcomes):
            for cid, listed in with_detection.contributors.items():
                honest_on = len(set(listed) - lazy)
                honest_off = len(set(without.contributors[cid]) - lazy)
                assert honest_on >= honest_off
                assert len(set(listed) & lazy) <= len(set(without.contributors[cid]) & lazy)
