"""Command line entry point: ``flowal run | report | selftest | preset``."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import reporting, selftest
from .config import BUDGETS, ConfigError, ExperimentConfig, preset, read_seeds
from .harness import PoolError, run_experiment
from .models import ModelStateError

log = logging.getLogger("flowal")


def parse_seeds(text):
    """'0,3,5' or '0-9' or a mix like '0-2,7'."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def _config_files(target):
    target = Path(target)
    if target.is_dir():
        files = sorted(target.glob("*.json"))
        if not files:
            raise ConfigError(f"{target}: no *.json configs")
        return files
    if not target.exists():
        raise ConfigError(f"{target}: no such file")
    return [target]


def _job(args):
    cfg_dict, out_dir, record_time, base_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    traj = run_experiment(cfg, out_dir=out_dir, record_time=record_time, base_dir=base_dir)
    last = traj.rows[-1]
    return f"{cfg.name} seed {cfg.seed}: {len(traj.rows)} rows, final nll {last['nll']:.4f}"


def cmd_run(args):
    jobs = []
    for path in _config_files(args.config):
        cfg = ExperimentConfig.from_file(path)
        seeds = args.seeds or read_seeds(path) or [cfg.seed]
        for s in seeds:
            d = cfg.to_dict()
            d["seed"] = int(s)
            out_dir = str(Path(args.out) / cfg.name)
            jobs.append((d, out_dir, args.record_time, str(path.parent.resolve())))
    log.info("%d run(s) queued", len(jobs))
    if args.parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for msg in pool.map(_job, jobs):
                print(msg)
    else:
        for job in jobs:
            print(_job(job))
    return 0


def cmd_report(args):
    table = reporting.report(args.results, args.out, metric=args.metric, alpha=args.alpha)
    for alg, r in sorted(table.mean_ranks().items(), key=lambda kv: (kv[1], kv[0])):
        print(f"{alg:24s} mean rank {r:.3f}")
    return 0


def cmd_selftest(args):
    return 0 if selftest.run(seed=args.seed) else 1


def cmd_preset(args):
    cfg = preset(args.dataset, args.model, args.acquisition)
    text = cfg.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="flowal", description="Active learning for probabilistic regression.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run experiments from a config file or a directory of configs")
    r.add_argument("config", help="JSON config file or directory of *.json files")
    r.add_argument("--seeds", type=parse_seeds, default=None, help="e.g. 0-9 or 0,2,5 (default: config)")
    r.add_argument("--parallel", type=int, default=1, help="worker processes")
    r.add_argument("--out", default="results", help="output directory (default: results)")
    r.add_argument("--record-time", action="store_true", help="fill the seconds column (breaks byte-identity)")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="rank and compare the trajectories under a results directory")
    rep.add_argument("results")
    rep.add_argument("--out", default=None, help="report directory (default: RESULTS/report)")
    rep.add_argument("--metric", default="nll", choices=reporting.METRICS)
    rep.add_argument("--alpha", type=float, default=0.05)
    rep.set_defaults(func=cmd_report)

    st = sub.add_parser("selftest", help="run the built-in property and oracle checks")
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_selftest)

    pr = sub.add_parser("preset", help="print a benchmark config with tuned defaults")
    pr.add_argument("dataset", choices=sorted(BUDGETS))
    pr.add_argument("--model", default="flow", choices=("flow", "gaussian"))
    pr.add_argument("--acquisition", default="random")
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_preset)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "report" and args.out is None:
        args.out = str(Path(args.results) / "report")
    if args.command == "run" and args.parallel < 1:
        parser.error("--parallel must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, PoolError, ModelStateError, reporting.ReportError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
