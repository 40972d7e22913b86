"""
blade-sim command line: run, sweep, pn-roc, chain-audit, budget, serve
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .blade_config import VERSION, Settings, load_sim_config
from .blade_logging import setup_logging
from .exceptions import BladeSimError, ConfigError
from .ledger.chain_io import audit_chain, chain_to_json, load_chain
from .node import budget_from_config
from .simulation import BladeSimulation, write_outputs
from .sweeps import AXES, auto_values, pn_roc, sweep, write_table

logger = logging.getLogger(__name__)


def _floats(raw: str, flag: str) -> List[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"{flag} expects comma-separated numbers, got '{raw}'") from e


def _out_dir(args, cfg, settings: Settings) -> Path:
    return Path(args.out or cfg.output.dir or settings.output_dir)


def cmd_run(args, settings: Settings) -> int:
    overrides = list(args.set or [])
    if args.trace:
        overrides.append('output.trace_jsonl="trace.jsonl"')
    cfg = load_sim_config(args.config, overrides)
    sim = BladeSimulation(cfg)
    report = sim.run()
    s = report.summary
    print(f"final accuracy {s.final_accuracy:.4f}  loss {s.final_loss:.4f}  "
          f"K={s.K} tau={s.tau} theta={s.theta:g}")
    if s.detection_tpr is not None:
        print(f"detection tpr {s.detection_tpr:.3f}  fpr {s.detection_fpr or 0.0:.3f}")
    if cfg.output.write:
        for name, path in write_outputs(sim, report, _out_dir(args, cfg, settings)).items():
            print(f"{name}: {path}")
    return 0


def cmd_sweep(args, settings: Settings) -> int:
    cfg = load_sim_config(args.config, args.set)
    if args.values.strip() == "auto":
        values = auto_values(cfg, args.axis)
    else:
        values = _floats(args.values, "--values")
    threads = args.threads or settings.threads
    table, per_seed = sweep(cfg, args.axis, values, seeds_per_point=args.seeds, threads=threads)
    print(table.to_string(index=False))
    out_dir = _out_dir(args, cfg, settings)
    print(f"summary: {write_table(table, out_dir / f'sweep_{args.axis}.csv')}")
    print(f"per-seed: {write_table(per_seed, out_dir / f'sweep_{args.axis}_seeds.csv')}")
    return 0


def cmd_pn_roc(args, settings: Settings) -> int:
    table = pn_roc(_floats(args.snr, "--snr"), _floats(args.gamma, "--gamma"),
                   trials=args.trials, use_len=args.use_len, degree=args.degree, seed=args.seed)
    print(table.to_string(index=False))
    if args.out:
        print(f"table: {write_table(table, args.out)}")
    return 0


def cmd_chain_audit(args, settings: Settings) -> int:
    chain = load_chain(args.dump)
    audit = audit_chain(chain)
    print(json.dumps(audit, indent=2, sort_keys=True))
    if args.json_out:
        chain_to_json(chain, args.json_out)
    return 0 if audit["valid"] else 1


def cmd_budget(args, settings: Settings) -> int:
    cfg = load_sim_config(args.config, args.set)
    budget = budget_from_config(cfg.budget, cfg.chain, cfg.n_clients,
                                cfg.data.samples_per_client, rounds=cfg.rounds)
    print(json.dumps({"t_T": budget.t_T, "t_B": budget.t_B, "theta": budget.theta,
                      "K": budget.K, "tau": budget.tau, "round_time": budget.round_time,
                      "T_Sum": budget.T_Sum}, indent=2))
    return 0


def cmd_serve(args, settings: Settings) -> int:
    from .app import serve

    serve(host=args.host, port=args.port or settings.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blade-sim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"blade-sim {VERSION}")
    parser.add_argument("--log-level", default=None, help="overrides BLADE_SIM_LOG_LEVEL")
    parser.add_argument("--log-json", action="store_true", help="JSON log lines")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", help="JSON or TOML experiment file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override, e.g. privacy.epsilon=5 (repeatable)")
        return p

    p = with_config(sub.add_parser("run", help="one seeded simulation"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--trace", action="store_true", help="also write trace.jsonl")
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("sweep", help="sweep one axis over seeds"))
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", required=True, help="comma-separated values, or 'auto' for K")
    p.add_argument("--seeds", type=int, default=1, help="independent seeds per value")
    p.add_argument("--threads", type=int, default=None, help="overrides BLADE_SIM_THREADS")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pn-roc", help="watermark detection rate table")
    p.add_argument("--snr", default="-6,-3,0,3,6,9", help="comma-separated SNR values (dB)")
    p.add_argument("--gamma", default="0.5", help="comma-separated thresholds")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--use-len", type=int, default=25400)
    p.add_argument("--degree", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_pn_roc)

    p = sub.add_parser("chain-audit", help="verify a chain dump")
    p.add_argument("dump")
    p.add_argument("--json-out", help="also export the chain as JSON")
    p.set_defaults(func=cmd_chain_audit)

    p = with_config(sub.add_parser("budget", help="print the round budget of a config"))
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("serve", help="start the tool service")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings()
    setup_logging(args.log_level or settings.log_level, args.log_json or settings.log_json)
    try:
        return args.func(args, settings)
    except BladeSimError as e:
        logger.error(f"[{e.code}] {e}")
        print(f"error [{e.code}]: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
