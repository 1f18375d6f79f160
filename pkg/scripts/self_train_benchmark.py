"""Supervised baseline vs. pseudo-label self-training on the synthetic layout benchmark.

    python scripts/self_train_benchmark.py --seeds 10 --json runs/self_train.json
"""
import argparse
import json
import logging
from pathlib import Path

from manuscriptor.benchmarks import LayoutBenchConfig, run_self_train_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--start", type=int, default=0)
    ap.add_argument("--json", help="write per-seed results here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR)

    cfg = LayoutBenchConfig()
    rows = []
    for seed in range(args.start, args.start + args.seeds):
        r = run_self_train_benchmark(seed, cfg)
        rows.append(r)
        delta = r["self_train_test_miou"] - r["baseline_test_miou"]
        print(f"seed {seed}: baseline {r['baseline_test_miou']:.4f}  "
              f"self-train {r['self_train_test_miou']:.4f}  ({delta:+.4f})  "
              f"rounds {[x['selected'] for x in r['rounds']]}  {r['seconds']:.0f}s", flush=True)
    ge = sum(r["self_train_test_miou"] >= r["baseline_test_miou"] for r in rows)
    gt = sum(r["self_train_test_miou"] > r["baseline_test_miou"] for r in rows)
    print(f">= baseline: {ge}/{len(rows)}   > baseline: {gt}/{len(rows)}")
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
