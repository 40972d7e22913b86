"""
Parameter sweeps over independent seeded runs, and the watermark ROC table
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd
from pydantic import ValidationError

from .blade_schemas import SimConfig
from .exceptions import ConfigError, SweepError
from .node import budget_from_config, epochs_for_rounds, max_rounds
from .seeding import derive_seed
from .simulation import CSV_HEADER, BladeSimulation
from .watermark import detection_rates

logger = logging.getLogger(__name__)

AXES = ("epsilon", "theta", "lazy_fraction", "snr_db", "K")
METRICS = ("final_accuracy", "final_loss", "detection_tpr", "detection_fpr")
SEED_MASK = (1 << 63) - 1


def apply_axis(cfg: SimConfig, axis: str, value: float) -> SimConfig:
    """A copy of `cfg` with one swept quantity set"""
    doc = cfg.model_dump(mode="json")
    if axis == "epsilon":
        doc["privacy"]["enabled"] = True
        doc["privacy"]["epsilon"] = value
    elif axis == "theta":
        doc["budget"].update(theta=value, t_T=None, c_T=None)
    elif axis == "lazy_fraction":
        doc["behaviors"]["lazy_fraction"] = value
    elif axis == "snr_db":
        doc["watermark"]["snr_db"] = value
    elif axis == "K":
        K = int(value)
        base = budget_from_config(cfg.budget.model_copy(update={"tau": 1}), cfg.chain,
                                  cfg.n_clients, cfg.data.samples_per_client)
        doc["rounds"] = K
        doc["budget"]["tau"] = epochs_for_rounds(K, base.t_T, base.t_B, base.T_Sum)
    else:
        raise SweepError(f"Unknown sweep axis '{axis}' (expected one of {', '.join(AXES)})",
                         code="BAD_AXIS")
    try:
        return SimConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"{axis}={value} is not a valid setting: {e}") from e


def auto_values(cfg: SimConfig, axis: str) -> List[float]:
    """2 .. K_max for the K axis"""
    if axis != "K":
        raise SweepError("'auto' values are only defined for the K axis", code="BAD_AXIS")
    base = budget_from_config(cfg.budget.model_copy(update={"tau": 1}), cfg.chain,
                              cfg.n_clients, cfg.data.samples_per_client)
    k_max = max_rounds(base.t_T, base.t_B, base.T_Sum)
    return [float(k) for k in range(2, k_max + 1)]


def point_seed(base_seed: int, axis: str, value: float, index: int) -> int:
    return derive_seed(base_seed, axis, float(value), index) & SEED_MASK


def _run_point(job: Tuple[str, float, int, Dict[str, Any]]) -> Dict[str, Any]:
    axis, value, index, doc = job
    cfg = SimConfig.model_validate(doc)
    report = BladeSimulation(cfg).run()
    summary = report.summary
    row = {"axis": axis, "value": value, "seed_index": index, "seed": cfg.seed,
           "K": summary.K, "tau": summary.tau, "theta": summary.theta}
    row.update({m: getattr(summary, m) for m in METRICS})
    return row


def sweep(config: SimConfig, axis: str, values: Sequence[float], seeds_per_point: int = 1,
          threads: int = 1) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Run every (value, seed) point; returns (per-value mean/std table, per-seed rows)"""
    if axis not in AXES:
        raise SweepError(f"Unknown sweep axis '{axis}' (expected one of {', '.join(AXES)})",
                         code="BAD_AXIS")
    if not values:
        raise SweepError("Sweep needs at least one value", code="EMPTY_VALUES")
    if seeds_per_point < 1:
        raise SweepError("seeds_per_point must be >= 1", code="EMPTY_VALUES")

    jobs = []
    for value in values:
        point = apply_axis(config, axis, value)
        for i in range(seeds_per_point):
            doc = point.model_dump(mode="json")
            doc["seed"] = point_seed(config.seed, axis, value, i)
            doc["output"]["write"] = False
            jobs.append((axis, float(value), i, doc))

    logger.info(f"Sweep {axis}: {len(values)} values x {seeds_per_point} seeds "
                f"on {threads} worker(s)")
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = [_run_point(job) for job in jobs]

    per_seed = pd.DataFrame(rows).sort_values(["value", "seed_index"]).reset_index(drop=True)
    per_seed[list(METRICS)] = per_seed[list(METRICS)].astype(float)
    return summarize(per_seed), per_seed


def summarize(per_seed: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample std of every metric per swept value"""
    metrics = [m for m in METRICS if per_seed[m].notna().any()]
    grouped = per_seed.groupby("value", sort=True)
    table = grouped[metrics].agg(["mean", "std"])
    table.columns = [f"{metric}_{stat}" for metric, stat in table.columns]
    table.insert(0, "seeds", grouped.size())
    for col in ("K", "tau", "theta"):
        table[col] = grouped[col].first()
    return table.reset_index()


def pn_roc(snr_values: Iterable[float], gammas: Iterable[float], trials: int = 500,
           use_len: int = 25400, degree: int = 15, seed: int = 0) -> pd.DataFrame:
    """Detection and false-alarm rates over an SNR x gamma grid"""
    rows = []
    for snr in snr_values:
        for gamma in gammas:
            tpr, fpr = detection_rates(snr, gamma, trials=trials, use_len=use_len,
                                       degree=degree, seed=seed)
            rows.append({"snr_db": float(snr), "gamma": float(gamma), "tpr": tpr, "fpr": fpr})
    return pd.DataFrame(rows, columns=["snr_db", "gamma", "tpr", "fpr"])


def write_table(df: pd.DataFrame, path: Union[str, Path], header: Optional[str] = CSV_HEADER
                ) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if header:
            fh.write(header + "\n")
        df.to_csv(fh, index=False, lineterminator="\n")
    return path
