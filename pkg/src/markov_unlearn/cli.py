"""``markov-unlearn`` command line.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (or a
failed ``verify`` property). Progress goes to stderr and the run's log file;
machine-readable output goes to files in the run directory or to stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import config as C
from . import model as M
from . import runner as R

log = logging.getLogger("markov_unlearn")

COMMANDS = ("gen-data", "pretrain", "retrain", "unlearn", "relearn", "eval", "sweep", "verify")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markov-unlearn",
        description="Unlearning experiments on a mixture of Markov chains.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (section.key [unit] meaning):\n" + C.describe_keys(),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, formatter_class=argparse.RawDescriptionHelpFormatter,
                           epilog="config keys:\n" + C.describe_keys())
        p.add_argument("--config", help="config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value; repeatable")
        p.add_argument("--out", help="run directory (overrides run.out_dir)")
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("MARKOV_UNLEARN_THREADS", "0")) or os.cpu_count(),
                       help="worker threads/processes (env MARKOV_UNLEARN_THREADS)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("unlearn", "relearn", "eval"):
            p.add_argument("--checkpoint", help="start from this checkpoint instead of the cached model")
        if name == "unlearn":
            p.add_argument("--resume", help="continue from a mid-trajectory checkpoint")
            p.add_argument("--checkpoint-every", type=int, default=0,
                           help="also save a resumable checkpoint every N iterations")
        if name == "eval":
            p.add_argument("--model", choices=("original", "retrain"), default="original",
                           help="cached model to evaluate when --checkpoint is absent")
        if name == "verify":
            p.add_argument("--quick", action="store_true", help="fewer random configurations")
    return parser


def _load_config(args) -> C.ExperimentConfig:
    overrides = list(args.set)
    if args.out:
        overrides.append(f"run.out_dir={args.out}")
    if args.config:
        return C.load(args.config, overrides)
    return C.parse_text("", overrides)


def _setup_logging(out_dir: Path | None, verbose: bool) -> None:
    log.handlers.clear()
    log.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(fmt)
    err.setLevel(logging.INFO if verbose else logging.WARNING)
    log.addHandler(err)
    if out_dir is not None:
        fh = logging.FileHandler(out_dir / "log.txt")
        fh.setFormatter(fmt)
        log.addHandler(fh)
    log.propagate = False


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _start_model(cfg, args) -> M.ModelParams:
    if getattr(args, "checkpoint", None):
        params, _, _ = M.load_checkpoint(args.checkpoint)
        return params
    params, _ = R.pretrain(cfg)
    return params


def cmd_gen_data(cfg, args, out: Path) -> None:
    bm = R.benchmark(cfg)
    bm.full.save(out / "data" / "all")
    bm.pretrain.save(out / "data" / "pretrain")
    bm.forget.train().save(out / "data" / "forget_train")
    _progress(f"wrote {len(bm.full)} sequences to {out / 'data'}")


def _train_cmd(cfg, out: Path, kind: str) -> None:
    fn = R.pretrain if kind == "original" else R.retrain
    t0 = time.time()
    params, history = fn(cfg)
    M.save_checkpoint(out / "checkpoints" / f"{kind}.ckpt", params, extra={"history": history})
    rep = R.evaluate(cfg, params, 0, kind)
    rep.extra["loss_history"] = history
    rows = R.csv_rows(cfg.run.name, cfg.run.seed, [rep], skip_initial=False)
    R.write_csv(out / "results.csv", rows)
    R.write_jsonl(out / "reports.jsonl", [rep], cfg.run.name)
    _progress(f"{kind}: retain_kl={rep.retain_kl:.4f} forget1_kl={rep.forget1_kl:.4f} "
              f"forget2_kl={rep.forget2_kl:.4f} ({time.time() - t0:.0f}s)")


def cmd_unlearn(cfg, args, out: Path) -> None:
    start = _start_model(cfg, args)
    ckdir = out / "checkpoints"
    resume = R.load_trajectory_state(args.resume) if args.resume else None
    every = args.checkpoint_every
    traj = resume
    if every:
        while traj is None or traj.iteration < cfg.unlearn.iterations:
            nxt = (traj.iteration if traj else 0) + every
            traj = R.unlearn(cfg, start, resume=traj, stop_at=nxt, checkpoint_dir=ckdir)
    else:
        traj = R.unlearn(cfg, start, resume=resume)
    R.save_trajectory_state(ckdir / "final.ckpt", traj)
    R.write_csv(out / "results.csv", R.csv_rows(cfg.run.name, cfg.run.seed, traj.reports))
    R.write_jsonl(out / "reports.jsonl", traj.reports, cfg.run.name)
    last = traj.reports[-1]
    _progress(f"{cfg.unlearn.method}: iteration {last.iteration} retain_kl={last.retain_kl:.4f} "
              f"forget1_kl={last.forget1_kl:.4f} forget2_kl={last.forget2_kl:.4f}")


def cmd_relearn(cfg, args, out: Path) -> None:
    if args.checkpoint:
        params = R.load_trajectory_state(args.checkpoint).params
    else:
        start, _ = R.pretrain(cfg)
        traj = R.unlearn(cfg, start)
        R.save_trajectory_state(out / "checkpoints" / "unlearned.ckpt", traj)
        params = traj.params
    reports = R.relearn(cfg, params, cfg.unlearn.method)
    R.write_csv(out / "results.csv", R.csv_rows(cfg.run.name, cfg.run.seed, reports, skip_initial=False))
    R.write_jsonl(out / "reports.jsonl", reports, cfg.run.name)
    orig, _ = R.pretrain(cfg)
    level = R.evaluate(cfg, orig).forget2_kl
    ep = R.epochs_to_recover(reports, level)
    _progress(f"relearn ({cfg.relearn.mode}, {cfg.relearn.fraction:g}): forget2 gap halved at epoch {ep}")


def cmd_eval(cfg, args, out: Path) -> None:
    if args.checkpoint:
        params, _, _ = M.load_checkpoint(args.checkpoint)
        label = Path(args.checkpoint).stem
    else:
        params, _ = (R.pretrain if args.model == "original" else R.retrain)(cfg)
        label = args.model
    rep = R.evaluate(cfg, params, 0, label)
    R.write_csv(out / "results.csv", R.csv_rows(cfg.run.name, cfg.run.seed, [rep], skip_initial=False),
                append=True)
    print(json.dumps(rep.to_dict(), sort_keys=True))


def cmd_sweep(cfg, args, out: Path) -> None:
    rows, summary, best, _ = R.sweep(cfg, threads=args.threads)
    R.write_csv(out / "results.csv", rows)
    cols = ["run_id", "method", "beta", "gamma", "lambda", "seed", "retain_kl", "forget1_kl",
            "forget2_kl", "score", "eligible", "best"]
    R.write_csv(out / "summary.csv", [[R._fmt(r[c]) for c in cols] for r in summary], header=cols,
                comment=R.SCALARIZATION + f" (retain_cap={cfg.sweep.retain_cap!r})")
    for method, row in best.items():
        _progress(f"best {method}: {row['run_id']} score={row['score']:.4f} retain_kl={row['retain_kl']:.4f}")


def cmd_verify(cfg, args, out: Path | None) -> int:
    from .verify import run_all
    results = run_all(quick=args.quick)
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        ok &= passed
    return 0 if ok else 2


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except C.ConfigError as e:
        print(str(e), file=sys.stderr)
        return 1
    except OSError as e:
        print(f"config: {e}", file=sys.stderr)
        return 1
    from threadpoolctl import threadpool_limits
    threads = max(1, args.threads or 1)
    with threadpool_limits(limits=threads):
        if args.command == "verify":
            _setup_logging(None, args.verbose)
            return cmd_verify(cfg, args, None)
        out = R.prepare_run_dir(cfg)
        _setup_logging(out, args.verbose)
        handlers = {"gen-data": cmd_gen_data, "unlearn": cmd_unlearn, "relearn": cmd_relearn,
                    "eval": cmd_eval, "sweep": cmd_sweep}
        try:
            if args.command in ("pretrain", "retrain"):
                _train_cmd(cfg, out, "original" if args.command == "pretrain" else "retrain")
            else:
                handlers[args.command](cfg, args, out)
        except R.NumericalFailure as e:
            log.error("numerical failure: %s", e)
            traj = e.trajectory
            if traj is not None and traj.reports:
                R.write_csv(out / "results.csv", R.csv_rows(cfg.run.name, cfg.run.seed, traj.reports))
                R.write_jsonl(out / "reports.jsonl", traj.reports, cfg.run.name)
            return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
