"""Train the line recogniser on a procedural-glyph corpus and report held-out CER/WER.

    python scripts/ocr_benchmark.py --out runs/ocr
    python scripts/ocr_benchmark.py --out runs/ocr_ab --blackout both --epochs 10
"""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from manuscriptor.benchmarks import OcrBenchConfig, run_ocr_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ocr")
    ap.add_argument("--lines", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--decode", choices=("greedy", "beam"), default="greedy")
    ap.add_argument("--blackout", choices=("on", "off", "both"), default="on",
                    help="'both' trains twice for an A/B comparison of padding blackout")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    base = OcrBenchConfig(n_lines=args.lines, seed=args.seed)
    modes = {"on": [True], "off": [False], "both": [True, False]}[args.blackout]
    summary = {}
    for blackout in modes:
        cfg = replace(base, train=replace(base.train, max_epochs=args.epochs, blackout=blackout))
        name = "blackout" if blackout else "white_pad"
        res = run_ocr_benchmark(Path(args.out) / name, cfg, args.decode)
        res.pop("history")
        summary[name] = res
        print(f"{name}: CER {res['cer']:.4f}  WER {res['wer']:.4f}  "
              f"epochs {res['epochs']}  {res['seconds']:.0f}s", flush=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")


if __name__ == "__main__":
    main()
