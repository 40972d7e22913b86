#!/usr/bin/env python3
"""
Operation facade for blade-sim: runs, sweeps, ROC tables, chain audits and
budget queries, each returning a plain result dictionary
"""

import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .blade_config import Settings, build_sim_config
from .exceptions import BladeSimError
from .ledger.chain_io import audit_chain, load_chain
from .node import compute_budget
from .simulation import BladeSimulation, write_outputs
from .sweeps import auto_values, pn_roc, sweep

logger = logging.getLogger(__name__)


class SimulationOperations:
    """Handles simulator operations for the CLI and the tool service"""

    def __init__(self, settings: Settings):
        self.settings = settings

    async def _call(self, name: str, fn, *args) -> Dict[str, Any]:
        try:
            # Runs are CPU bound; keep them off the event loop
            loop = asyncio.get_event_loop()
            return await loop.run_in_executor(None, fn, *args)
        except BladeSimError as e:
            logger.error(f"{name} failed [{e.code}]: {e}")
            return e.to_dict()
        except Exception as e:
            logger.error(f"{name} failed: {e}")
            return {"success": False, "error": str(e)}

    # -- run --------------------------------------------------------------

    async def run_simulation(self, config: Optional[Dict[str, Any]] = None,
                             overrides: Optional[List[str]] = None,
                             out_dir: Optional[str] = None) -> Dict[str, Any]:
        return await self._call("run", self._run_simulation, config, overrides, out_dir)

    def _run_simulation(self, config, overrides, out_dir) -> Dict[str, Any]:
        cfg = build_sim_config(config, overrides)
        sim = BladeSimulation(cfg)
        report = sim.run()
        written = {}
        target = out_dir or cfg.output.dir
        if cfg.output.write and target:
            written = write_outputs(sim, report, target)
        return {
            "success": True,
            "seed": report.seed,
            "summary": report.summary.model_dump(),
            "rounds": [r.model_dump() for r in report.rounds],
            "outputs": written,
        }

    # -- sweep ------------------------------------------------------------

    async def run_sweep(self, axis: str, values: Sequence[Any],
                        config: Optional[Dict[str, Any]] = None,
                        overrides: Optional[List[str]] = None,
                        seeds_per_point: int = 1) -> Dict[str, Any]:
        return await self._call("sweep", self._run_sweep, axis, values, config, overrides,
                                seeds_per_point)

    def _run_sweep(self, axis, values, config, overrides, seeds_per_point) -> Dict[str, Any]:
        cfg = build_sim_config(config, overrides)
        if values == "auto" or list(values) == ["auto"]:
            points = auto_values(cfg, axis)
        else:
            points = [float(v) for v in values]
        table, per_seed = sweep(cfg, axis, points, seeds_per_point=seeds_per_point,
                                threads=self.settings.threads)
        return {
            "success": True,
            "axis": axis,
            "values": points,
            "summary": _records(table),
            "per_seed": _records(per_seed),
            "row_count": len(table),
        }

    # -- watermark ROC ------------------------------------------------------

    async def watermark_roc(self, snr_values: Sequence[float], gammas: Sequence[float],
                            trials: int = 500, use_len: int = 25400, degree: int = 15,
                            seed: int = 0) -> Dict[str, Any]:
        return await self._call("pn_roc", self._watermark_roc, snr_values, gammas, trials,
                                use_len, degree, seed)

    def _watermark_roc(self, snr_values, gammas, trials, use_len, degree, seed
                       ) -> Dict[str, Any]:
        table = pn_roc(snr_values, gammas, trials=trials, use_len=use_len, degree=degree,
                       seed=seed)
        return {"success": True, "columns": list(table.columns), "rows": _records(table),
                "row_count": len(table)}

    # -- chain audit ------------------------------------------------------

    async def chain_audit(self, path: str) -> Dict[str, Any]:
        return await self._call("chain_audit", self._chain_audit, path)

    def _chain_audit(self, path: str) -> Dict[str, Any]:
        chain = load_chain(Path(path))
        return {"success": True, **audit_chain(chain)}

    # -- budget -----------------------------------------------------------

    async def round_budget(self, **symbols: Any) -> Dict[str, Any]:
        return await self._call("compute_budget", self._round_budget, symbols)

    def _round_budget(self, symbols: Dict[str, Any]) -> Dict[str, Any]:
        budget = compute_budget(
            k=float(symbols.get("k", 1.0)), c_B=float(symbols.get("c_B", 40.0)),
            N=int(symbols.get("N", 20)), f=float(symbols.get("f", 1.0)),
            data_size=int(symbols.get("data_size", 200)), c_T=float(symbols.get("c_T", 0.06)),
            tau=int(symbols.get("tau", 1)), T_Sum=float(symbols.get("T_Sum", 200.0)),
            rounds=symbols.get("rounds"))
        return {
            "success": True,
            "t_T": budget.t_T,
            "t_B": budget.t_B,
            "theta": budget.theta,
            "K": budget.K,
            "tau": budget.tau,
            "round_time": budget.round_time,
            "T_Sum": budget.T_Sum,
        }


def _records(df) -> List[Dict[str, Any]]:
    # NaN is not valid JSON
    return df.astype(object).where(df.notna(), None).to_dict(orient="records")
