"""Desk-scale synthetic benchmarks shared by the scripts, the CLI and the
acceptance tests: OCR learnability on a procedural alphabet and the
low-label layout self-training comparison."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layout, net, recognizer, synth

log = logging.getLogger(__name__)


def random_words(symbols, n_words: int, rng: np.random.Generator,
                 min_len: int = 2, max_len: int = 5) -> str:
    """Space-separated words of uniformly drawn symbols."""
    symbols = list(symbols)
    words = ["".join(rng.choice(symbols, int(rng.integers(min_len, max_len + 1))))
             for _ in range(n_words)]
    return " ".join(words)


def _ocr_train_default() -> recognizer.TrainConfig:
    # a third block that pools height only; see README for the sizing rationale
    return recognizer.TrainConfig(
        target_height=16, max_epochs=30,
        net=net.NetConfig(conv_spec=[[16, 3, 1, 2], [32, 3, 1, 2], [64, 3, 1, [2, 1]]]))


@dataclass
class OcrBenchConfig:
    n_lines: int = 2000
    n_glyphs: int = 12
    glyph_variants: int = 3
    words_per_file: int = 260
    max_tokens: int = 12
    seed: int = 0
    train: recognizer.TrainConfig = field(default_factory=_ocr_train_default)


def build_ocr_corpus(out_dir, cfg: OcrBenchConfig = OcrBenchConfig()) -> synth.Manifest:
    """Random-word text files rendered with procedural glyphs until
    ``n_lines`` line pairs exist."""
    out_dir = Path(out_dir)
    text_dir = out_dir / "text"
    text_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    chars = synth.HEBREW_LETTERS[:cfg.n_glyphs]
    glyphs = synth.make_procedural_glyphs(chars, cfg.glyph_variants, seed=cfg.seed)
    # about 4 words per line; 25% headroom so the line cap is always reached
    n_files = int(np.ceil(1.25 * cfg.n_lines * 4 / cfg.words_per_file))
    files = []
    for i in range(n_files):
        path = text_dir / f"{i:03d}.txt"
        path.write_text(random_words(chars, cfg.words_per_file, rng) + "\n", encoding="utf-8")
        files.append(path)
    corpus = synth.CorpusParams(max_tokens=cfg.max_tokens, max_pairs=cfg.n_lines)
    manifest = synth.build_corpus(files, glyphs, synth.CompositionParams(), out_dir,
                                  cfg.seed, corpus)
    if len(manifest) < cfg.n_lines:
        raise RuntimeError(f"corpus has {len(manifest)} lines, wanted {cfg.n_lines}")
    return manifest


def run_ocr_benchmark(out_dir, cfg: OcrBenchConfig = OcrBenchConfig(),
                      decode: str = "greedy") -> dict:
    """Build the corpus, train, and score the held-out test split."""
    t0 = time.perf_counter()
    manifest = build_ocr_corpus(out_dir, cfg)
    samples = recognizer.load_samples(synth.read_manifest(manifest.path))
    t1 = time.perf_counter()
    result = recognizer.train(samples, cfg.train, out=Path(out_dir) / "recognizer.ckpt")
    t2 = time.perf_counter()
    report = recognizer.evaluate(result.recognizer, result.test, decode)
    return {
        "lines": len(samples), "train": len(result.train), "val": len(result.val),
        "test": len(result.test), "epochs": len(result.history),
        "best_epoch": result.best_epoch, "cer": report.cer, "wer": report.wer,
        "test_loss": report.loss, "synth_seconds": t1 - t0, "train_seconds": t2 - t1,
        "seconds": time.perf_counter() - t0, "history": result.history,
    }


# ------------------------------------------------------------------ layout

@dataclass
class LayoutBenchConfig:
    n_labeled: int = 10
    n_val: int = 20
    n_test: int = 40
    n_pool: int = 100
    page: dict = field(default_factory=lambda: dict(layout.BENCHMARK_PAGE))
    self_train: layout.SelfTrainConfig = field(default_factory=lambda: layout.SelfTrainConfig(
        **layout.BENCHMARK_SELF_TRAIN))


def layout_bench_sets(seed: int, cfg: LayoutBenchConfig = LayoutBenchConfig()):
    """Disjoint labeled / val / test / pool page sets for one benchmark seed."""
    sizes = (("L", cfg.n_labeled), ("V", cfg.n_val), ("T", cfg.n_test), ("U", cfg.n_pool))
    ss = np.random.SeedSequence([seed, 7])
    children = ss.spawn(len(sizes))
    return [layout.synthetic_layout_set(n, int(child.generate_state(1)[0]), prefix, **cfg.page)
            for (prefix, n), child in zip(sizes, children)]


def run_self_train_benchmark(seed: int, cfg: LayoutBenchConfig = LayoutBenchConfig()) -> dict:
    """Supervised baseline against self-training on one seed's page sets."""
    t0 = time.perf_counter()
    labeled, val, test, pool = layout_bench_sets(seed, cfg)
    st = layout.SelfTrainConfig(**{**asdict(cfg.self_train), "seed": seed})
    result = layout.self_train(labeled, pool, st, val=val)
    base = layout.evaluate_pages(result.baseline_model, test)
    final = layout.evaluate_pages(result.model, test)
    return {"seed": seed, "baseline_test_miou": base, "self_train_test_miou": final,
            "baseline_val_miou": result.baseline_val_miou, "best_val_miou": result.best_val_miou,
            "rounds": [{"round": r["round"], "selected": len(r["selected"]),
                        "val_miou": r["val_miou"]} for r in result.rounds],
            "seconds": time.perf_counter() - t0}
