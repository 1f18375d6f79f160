"""Command-line entry point: ``manuscriptor <command> [--config run.json] ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Evaluation commands print JSON on stdout; logs go to stderr.
"""
from __future__ import annotations

import argparse
from dataclasses import asdict
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import layout, net, pagesplit, recognizer, synth
from .config import ConfigError, RunConfig, apply_seed, load_config, repro_header
from .raster import RasterError, load_png, save_mask_png, save_png

log = logging.getLogger("manuscriptor")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
GATE_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"missing {flag} (flag or config)")
    return value


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=1, sort_keys=True, ensure_ascii=False)
    sys.stdout.write("\n")


def _text_files(entries) -> list[Path]:
    files = []
    for e in entries:
        p = Path(e)
        if p.is_dir():
            files.extend(sorted(p.glob("*.txt")))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"text source not found: {p}")
    if not files:
        raise ConfigError("no text files given")
    return files


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    sec = cfg.synth
    texts = args.text or sec.text_files
    out = _require(args.out or sec.out_dir, "--out")
    glyph_dir = args.glyphs or sec.glyph_dir
    if glyph_dir:
        glyphs = synth.load_glyph_set(glyph_dir)
    else:
        n = args.procedural or sec.procedural_glyphs
        glyphs = synth.make_procedural_glyphs(synth.HEBREW_LETTERS[:n], sec.glyph_variants,
                                              seed=cfg.effective_seed())
    manifest = synth.build_corpus(_text_files(_require(texts, "--text")), glyphs, sec.composition,
                                  out, cfg.effective_seed(), sec.corpus, jobs=args.jobs)
    _emit({"manifest": str(manifest.path), "pairs": len(manifest),
           "rejected_pages": manifest.rejected_pages, "skipped_files": manifest.skipped_files})
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    sec = cfg.split
    records = pagesplit.split_collection(
        _require(args.images or sec.color_dir, "--images"),
        mask_dir=args.masks or sec.mask_dir, bbox_dir=args.bboxes or sec.bbox_dir,
        out_dir=_require(args.out or sec.out_dir, "--out"),
        binary_dir=args.binary or sec.binary_dir,
        border_margin=sec.border_margin if args.border_margin is None else args.border_margin)
    _emit({r.source: r.split_x for r in records})
    return EXIT_OK


def _ocr_samples(manifest):
    return recognizer.load_samples(synth.read_manifest(manifest))


def cmd_train_ocr(args, cfg: RunConfig) -> int:
    sec = cfg.ocr
    if args.epochs is not None:
        sec.train.max_epochs = args.epochs
    manifest = _require(args.manifest or sec.manifest, "--manifest")
    out = _require(args.out or sec.checkpoint, "--out")
    result = recognizer.train(_ocr_samples(manifest), sec.train, out=out)
    _emit({"checkpoint": str(out), "best_epoch": result.best_epoch,
           "epochs": len(result.history), "skipped": result.skipped,
           "best_val_loss": result.history[result.best_epoch]["val_loss"]
           if result.best_epoch >= 0 else None})
    return EXIT_OK


def _decode_args(args, cfg):
    return args.decode or cfg.ocr.decode, args.beam_width or cfg.ocr.beam_width


def cmd_transcribe(args, cfg: RunConfig) -> int:
    from . import ctc
    mode, width = _decode_args(args, cfg)
    if args.logits:
        with open(args.logits, encoding="utf-8") as fh:
            dump = json.load(fh)
        try:
            alphabet = ctc.Alphabet(tuple(dump["alphabet"]))
            frames = np.asarray(dump["frames"], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{args.logits}: expected keys 'alphabet' and 'frames'") from exc
        if frames.ndim != 2 or frames.shape[1] != alphabet.num_classes:
            raise ConfigError(f"frames must be T x {alphabet.num_classes}")
        lp = net.log_softmax(frames)
        text = ctc.greedy_decode(lp, alphabet) if mode == "greedy" \
            else ctc.beam_decode(lp, alphabet, width)
        _emit({"text": text})
        return EXIT_OK
    rec, _ = recognizer.load_recognizer(_require(args.checkpoint or cfg.ocr.checkpoint,
                                                 "--checkpoint"))
    if not args.images:
        raise ConfigError("give image paths or --logits")
    out = []
    for path in args.images:
        img = load_png(path)
        if img.ndim == 3:
            img = np.rint(img @ np.array([0.299, 0.587, 0.114])).astype(np.uint8)
        out.append({"image": str(path), "text": recognizer.transcribe(rec, img, mode, width)})
    _emit(out)
    return EXIT_OK


def cmd_eval_ocr(args, cfg: RunConfig) -> int:
    mode, width = _decode_args(args, cfg)
    rec, header = recognizer.load_recognizer(_require(args.checkpoint or cfg.ocr.checkpoint,
                                                      "--checkpoint"))
    samples = _ocr_samples(_require(args.manifest or cfg.ocr.manifest, "--manifest"))
    if args.subset != "all":
        keys = set(header.get("split", {}).get(args.subset, []))
        samples = [s for s in samples if s.key in keys]
        if not samples:
            raise ConfigError(f"no manifest entries belong to the checkpoint's {args.subset} split")
    report = recognizer.evaluate(rec, samples, mode, width,
                                 transcripts_path=args.transcripts or cfg.ocr.transcripts,
                                 normalize_by_target_len=cfg.ocr.train.normalize_by_target_len)
    _emit({"loss": report.loss, "cer": report.cer, "wer": report.wer, "n": len(samples),
           "decode": mode})
    return EXIT_OK


def _pages(directory, flag, with_masks=True):
    pages = layout.load_layout_dir(_require(directory, flag), with_masks)
    if not pages:
        raise ConfigError(f"no pages under {directory}/images")
    if with_masks and any(p.mask is None for p in pages):
        raise ConfigError(f"{directory}: every image needs a mask")
    return pages


def cmd_train_layout(args, cfg: RunConfig) -> int:
    sec = cfg.layout
    st = sec.self_train
    labeled = _pages(args.labeled or sec.labeled_dir, "--labeled")
    val_dir = args.val or sec.val_dir
    if val_dir:
        train, val, test = labeled, _pages(val_dir, "--val"), []
    else:
        train, val, test = layout.split_labeled(labeled, st)
    result = layout.train_segmenter(train, val, st)
    out = _require(args.out or sec.checkpoint, "--out")
    layout.save_segmenter(result.model, out, result.history,
                          {"best_epoch": result.best_epoch, "config": asdict(st)})
    report = {"checkpoint": str(out), "best_epoch": result.best_epoch,
              "val_miou": result.best_miou}
    if test:
        report["test_miou"] = layout.evaluate_pages(result.model, test)
    _emit(report)
    return EXIT_OK


def cmd_self_train(args, cfg: RunConfig) -> int:
    sec = cfg.layout
    labeled = _pages(args.labeled or sec.labeled_dir, "--labeled")
    pool = _pages(args.pool or sec.pool_dir, "--pool", with_masks=False)
    val_dir = args.val or sec.val_dir
    val = _pages(val_dir, "--val") if val_dir else None
    result = layout.self_train(labeled, pool, sec.self_train, val=val)
    out = _require(args.out or sec.checkpoint, "--out")
    layout.save_segmenter(result.model, out, extra={"rounds": result.rounds,
                                                    "config": asdict(sec.self_train)})
    report = result.report()
    test_dir = args.test or sec.test_dir
    if test_dir:
        test = _pages(test_dir, "--test")
        report["baseline_test_miou"] = layout.evaluate_pages(result.baseline_model, test)
        report["test_miou"] = layout.evaluate_pages(result.model, test)
    report_path = args.report or sec.report
    if report_path:
        Path(report_path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n",
                                     encoding="utf-8")
    _emit(report)
    return EXIT_OK


def cmd_eval_layout(args, cfg: RunConfig) -> int:
    model, _ = layout.load_segmenter(_require(args.checkpoint or cfg.layout.checkpoint,
                                              "--checkpoint"))
    pages = _pages(args.data or cfg.layout.test_dir, "--data")
    _emit({"miou": layout.evaluate_pages(model, pages), "n": len(pages)})
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    report = recognizer.gradient_gate(cfg.effective_seed())
    worst = max(report.values())
    _emit({"checks": report, "max_rel_error": worst, "tolerance": GATE_TOLERANCE,
           "passed": worst < GATE_TOLERANCE})
    print(f"max rel. error {worst:.3e}", file=sys.stderr)
    return EXIT_OK if worst < GATE_TOLERANCE else EXIT_RUNTIME


def cmd_bench(args, cfg: RunConfig) -> int:
    from .benchmarks import LayoutBenchConfig, layout_bench_sets
    out = Path(_require(args.out, "--out"))
    bench = LayoutBenchConfig(n_labeled=args.labeled, n_val=args.val, n_test=args.test,
                              n_pool=args.pool)
    names = ("labeled", "val", "test", "pool")
    for name, pages in zip(names, layout_bench_sets(cfg.effective_seed(), bench)):
        (out / name / "images").mkdir(parents=True, exist_ok=True)
        # pool masks are kept apart so the pool directory stays unlabeled
        mask_dir = out / ("pool_truth" if name == "pool" else name) / "masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
        for p in pages:
            save_png(p.image, out / name / "images" / f"{p.stem}.png")
            save_mask_png(p.mask, mask_dir / f"{p.stem}.png")
    _emit({"out": str(out), "labeled": args.labeled, "val": args.val, "test": args.test,
           "pool": args.pool})
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="manuscriptor", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--jobs", type=int, default=1, help="worker process cap")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "compose synthetic pages and write line image/text pairs")
    p.add_argument("--text", nargs="+", help="text files or directories of .txt files")
    p.add_argument("--glyphs", help="glyph set directory")
    p.add_argument("--procedural", type=int, help="use N procedural glyph classes")
    p.add_argument("--out", help="output directory")

    p = add("split", cmd_split, "split double-page scans and their companions")
    p.add_argument("--images")
    p.add_argument("--masks")
    p.add_argument("--bboxes")
    p.add_argument("--binary")
    p.add_argument("--out")
    p.add_argument("--border-margin", type=int)

    p = add("train-ocr", cmd_train_ocr, "train the line recogniser on a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--epochs", type=int)

    for name, func, help_ in (("transcribe", cmd_transcribe, "decode line images or a logit dump"),
                              ("eval-ocr", cmd_eval_ocr, "CTC loss, CER and WER on a manifest")):
        p = add(name, func, help_)
        p.add_argument("--checkpoint")
        p.add_argument("--decode", choices=("greedy", "beam"))
        p.add_argument("--beam-width", type=int)
    sub.choices["transcribe"].add_argument("images", nargs="*")
    sub.choices["transcribe"].add_argument("--logits", help='JSON {"alphabet": ..., "frames": [[...]]}')
    sub.choices["eval-ocr"].add_argument("--manifest")
    sub.choices["eval-ocr"].add_argument("--subset", choices=("all", "train", "val", "test"),
                                         default="all")
    sub.choices["eval-ocr"].add_argument("--transcripts")

    p = add("train-layout", cmd_train_layout, "supervised segmenter training")
    p.add_argument("--labeled")
    p.add_argument("--val")
    p.add_argument("--out")

    p = add("self-train", cmd_self_train, "supervised baseline plus pseudo-label rounds")
    p.add_argument("--labeled")
    p.add_argument("--pool")
    p.add_argument("--val")
    p.add_argument("--test")
    p.add_argument("--out")
    p.add_argument("--report")

    p = add("eval-layout", cmd_eval_layout, "mean IoU of a segmenter on labeled pages")
    p.add_argument("--checkpoint")
    p.add_argument("--data")

    add("gradcheck", cmd_gradcheck, "finite-difference gate over layers and the CTC stack")

    p = add("bench", cmd_bench, "write the synthetic layout benchmark")
    p.add_argument("--out")
    p.add_argument("--labeled", type=int, default=10)
    p.add_argument("--val", type=int, default=20)
    p.add_argument("--test", type=int, default=40)
    p.add_argument("--pool", type=int, default=100)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            apply_seed(cfg, args.seed)
        print(repro_header(cfg, args.command), file=sys.stderr)
        return args.func(args, cfg)
    except (ConfigError, ValueError, KeyError, FileNotFoundError, RasterError,
            net.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
