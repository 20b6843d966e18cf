"""Run both tradeoff experiments for seeds 0-2 and print the per-criterion verdicts.

Results go to runs/acceptance/<exp>-seed<k>.json and are reused by
tests/test_acceptance.py; delete them to force a rerun. Training is pinned to
one BLAS thread so the recorded pipeline time is the single-threaded figure.

    python scripts/run_acceptance_pipeline.py [--out runs/acceptance] [--seeds 0 1 2]
"""
import argparse
import json
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from markov_unlearn import study


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/acceptance")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--experiments", nargs="+", default=["exp1", "exp2"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    records = {}
    with threadpool_limits(limits=1):
        for exp in args.experiments:
            for seed in args.seeds:
                records[exp, seed] = study.load_or_run(out / f"{exp}-seed{seed}.json", exp, seed,
                                                       out / "cache", relearn=(exp == "exp1"))
    for (exp, seed), rec in records.items():
        verdicts = {"pipeline_min": round(rec["pipeline_seconds"] / 60, 1),
                    "pretraining": study.pretraining_outcome(rec)}
        if exp == "exp1":
            verdicts["exp1"] = study.exp1_outcome(rec)
            verdicts["weights"] = study.weight_outcome(rec)
            verdicts["relearn"] = study.relearn_outcome(rec)
        else:
            verdicts["exp2"] = study.exp2_outcome(rec)
        print(f"== {exp} seed {seed}")
        print(json.dumps(verdicts, indent=1, default=str))


if __name__ == "__main__":
    main()
