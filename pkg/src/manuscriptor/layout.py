"""Page layout segmentation: a small fully-convolutional segmenter trained
with foreground class weighting, confidence-gated pseudo-labelling of
unlabelled pages, and mean-IoU evaluation.

Label ids: 0 background, 1 heading, 2 paragraph, 3 request, 4 decision,
5 marginalia, 6 attendance, 7 catch_word, 8 date. The legacy id 11
(undefined) is folded into background when masks are loaded.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import net
from .raster import NoiseParams, load_mask_png, load_png, perlin_texture

log = logging.getLogger(__name__)

CLASS_NAMES = ("background", "heading", "paragraph", "request", "decision",
               "marginalia", "attendance", "catch_word", "date")
NUM_CLASSES = len(CLASS_NAMES)
FOREGROUND = tuple(range(1, NUM_CLASSES))
LEGACY_UNDEFINED = 11
# torchvision ImageNet statistics, used by the reference encoders
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class EmptyPageError(ValueError):
    """Mask has no foreground pixel, so there is nothing to learn from."""


def load_layout_mask(path) -> np.ndarray:
    mask = load_mask_png(path).copy()
    mask[mask == LEGACY_UNDEFINED] = 0
    bad = np.setdiff1d(np.unique(mask), np.arange(NUM_CLASSES))
    if bad.size:
        raise ValueError(f"{path}: unknown label ids {bad.tolist()}")
    return mask


# ----------------------------------------------------------------- loss/metrics

def class_weights(masks: Sequence[np.ndarray], eps: float = 1e-9) -> np.ndarray:
    """``total / (8 * (count_c + eps))`` for classes 1..8, background excluded from ``total``."""
    counts = np.zeros(NUM_CLASSES, dtype=np.float64)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    fg = counts[1:]
    total = fg.sum()
    missing = [CLASS_NAMES[c] for c in FOREGROUND if fg[c - 1] == 0]
    if missing:
        log.warning("classes absent from the masks get very large weights: %s", ", ".join(missing))
    return total / (8.0 * (fg + eps))


def weighted_ce(logits: np.ndarray, mask: np.ndarray, weights: np.ndarray,
                background_weight: float = 0.0,
                ignore: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Class-weighted pixel cross-entropy over the 9 channels.

    Pixel ``p`` with label ``c`` contributes ``w_c * -log softmax(logits)[c]``;
    background pixels use ``background_weight`` (0 masks them out) and pixels
    flagged in ``ignore`` get weight 0. The loss is the mean over pixels with a
    non-zero weight.
    """
    C, H, W = logits.shape
    if C != NUM_CLASSES or mask.shape != (H, W):
        raise ValueError(f"logits {logits.shape} do not match mask {mask.shape}")
    if not (mask > 0).any():
        raise EmptyPageError("empty page: mask has no foreground pixels")
    full_w = np.concatenate([[background_weight], np.asarray(weights, dtype=np.float64)])
    pix_w = full_w[mask]
    if ignore is not None:
        pix_w = np.where(ignore, 0.0, pix_w)
    n = int((pix_w > 0).sum())
    if n == 0:
        raise EmptyPageError("every pixel of the page is ignored")
    lsm = net.log_softmax(logits, axis=0)
    picked = np.take_along_axis(lsm, mask[None].astype(np.int64), axis=0)[0]
    loss = float(-(pix_w * picked).sum() / n)
    grad = np.exp(lsm) * pix_w
    onehot = np.zeros_like(lsm)
    np.put_along_axis(onehot, mask[None].astype(np.int64), 1.0, axis=0)
    grad = (grad - onehot * pix_w) / n
    return loss, grad


def iou_counts(pred: np.ndarray, gt: np.ndarray, classes=FOREGROUND):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    inter = np.array([np.sum((pred == c) & (gt == c)) for c in classes], dtype=np.int64)
    union = np.array([np.sum((pred == c) | (gt == c)) for c in classes], dtype=np.int64)
    return inter, union


def mean_iou(pred: np.ndarray, gt: np.ndarray, classes=FOREGROUND) -> float:
    """Mean per-class IoU over classes present in either map; background never counts."""
    inter, union = iou_counts(pred, gt, classes)
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(inter[present] / union[present]))


def dataset_miou(preds, gts, classes=FOREGROUND) -> float:
    """Mean IoU with intersections and unions pooled over all pages."""
    inter = np.zeros(len(classes), dtype=np.int64)
    union = np.zeros(len(classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        i, u = iou_counts(p, g, classes)
        inter += i
        union += u
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(inter[present] / union[present]))


def avg_confidence(confidence: np.ndarray, mask: np.ndarray, scope: str = "foreground") -> float:
    """Mean max-probability over pixels predicted as foreground (0 if there are none)."""
    if scope == "all":
        return float(confidence.mean())
    fg = mask > 0
    if not fg.any():
        return 0.0
    return float(confidence[fg].mean())


# ----------------------------------------------------------------------- model

@dataclass
class SegmenterConfig:
    channels: tuple[int, int] = (16, 32)
    pools: int = 2  # 2x2 max-pools before the head; predictions are upsampled back
    dropout_p: float = 0.0  # before the head, as in the reference ASPP projection
    seed: int = 42
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        if not 0 <= self.pools <= 2:
            raise ValueError("pools must be 0, 1 or 2 (no downsampling below /4)")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass
class SelfTrainConfig:
    confidence_threshold: float = 0.70
    confidence_scope: str = "foreground"
    patience: int = 5
    batch_size: int = 2
    lr: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 42
    test_fraction: float = 0.20
    val_fraction: float = 0.15
    max_epochs: int = 40
    max_rounds: int = 3
    background_weight: float = 0.0
    pixel_threshold: float | None = None  # pseudo-label pixels below this confidence are ignored
    eps: float = 1e-9
    model: SegmenterConfig = field(default_factory=SegmenterConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = SegmenterConfig(**self.model)
        if not 0 < self.confidence_threshold:
            raise ValueError("confidence_threshold must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.pixel_threshold is not None and not (
                isinstance(self.pixel_threshold, (int, float)) and 0 < self.pixel_threshold <= 1):
            raise ValueError("pixel_threshold must be None or in (0, 1]")


class Segmenter:
    """conv-relu x2, pools, conv-relu, 1x1 head to 9 channels, nearest upsample."""

    def __init__(self, cfg: SegmenterConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c1, c2 = cfg.channels
        layers = [net.Conv2d(3, c1, 3, rng, name="enc1"), net.ReLU(),
                  net.Conv2d(c1, c1, 3, rng, name="enc2"), net.ReLU()]
        for _ in range(cfg.pools):
            layers.append(net.MaxPool2d(2))
        layers += [net.Conv2d(c1, c2, 3, rng, name="enc3"), net.ReLU(),
                   net.Conv2d(c2, c2, 3, rng, name="enc4"), net.ReLU(),
                   net.Dropout(cfg.dropout_p, seed=cfg.seed),
                   net.Conv2d(c2, NUM_CLASSES, 1, rng, name="head"),
                   net.Upsample(2 ** cfg.pools)]
        self.body = net.Sequential(layers)
        self.factor = 2 ** cfg.pools

    def params(self):
        return self.body.params()

    def normalize(self, img: np.ndarray) -> np.ndarray:
        x = img.astype(np.float64) / 255.0
        x = (x - np.array(self.cfg.mean)) / np.array(self.cfg.std)
        return x.transpose(2, 0, 1)

    def _padded(self, img: np.ndarray):
        h, w = img.shape[:2]
        ph = (-h) % self.factor
        pw = (-w) % self.factor
        if ph or pw:
            img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
        return img, h, w

    def logits(self, img: np.ndarray, train: bool = False) -> np.ndarray:
        """``(9, H, W)`` logits for one RGB page; keeps state for :meth:`backward`."""
        padded, h, w = self._padded(img)
        out = self.body.forward(self.normalize(padded)[None], train)[0]
        self._crop = (h, w, out.shape)
        return out[:, :h, :w]

    def backward(self, grad: np.ndarray) -> None:
        h, w, shape = self._crop
        full = np.zeros(shape)
        full[:, :h, :w] = grad
        self.body.backward(full[None])

    def state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params()]

    def load_state(self, arrays) -> None:
        net.assign_params(self.params(), arrays)


def predict_mask(model: Segmenter, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels and the per-pixel max softmax probability."""
    lsm = net.log_softmax(model.logits(image), axis=0)
    return lsm.argmax(axis=0).astype(np.uint8), np.exp(lsm.max(axis=0))


@dataclass
class LayoutPage:
    stem: str
    image: np.ndarray
    mask: np.ndarray | None = None
    source: str = "gt"  # "gt" or "pseudo"
    ignore: np.ndarray | None = None  # pixels left out of the loss


def load_layout_dir(directory, with_masks: bool = True) -> list[LayoutPage]:
    """Pages from ``images/*.png`` and, when present, ``masks/*.png``."""
    directory = Path(directory)
    pages = []
    for img_path in sorted((directory / "images").glob("*.png")):
        img = load_png(img_path)
        if img.ndim != 3:
            img = np.repeat(img[:, :, None], 3, axis=2)
        mask = None
        mpath = directory / "masks" / img_path.name
        if with_masks and mpath.exists():
            mask = load_layout_mask(mpath)
            if mask.shape != img.shape[:2]:
                raise ValueError(f"{img_path.stem}: mask shape {mask.shape} != image {img.shape[:2]}")
        pages.append(LayoutPage(img_path.stem, img, mask))
    return pages


# -------------------------------------------------------------------- training

class EarlyStopping:
    """Counts epochs without improvement; ``step`` returns True when it is time to stop."""

    def __init__(self, patience: int, mode: str = "max", min_delta: float = 0.0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.sign = 1.0 if mode == "max" else -1.0
        self.min_delta = min_delta
        self.best = None
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        if self.best is None or self.sign * (value - self.best) > self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


def evaluate_pages(model: Segmenter, pages: Sequence[LayoutPage]) -> float:
    preds = [predict_mask(model, p.image)[0] for p in pages]
    return dataset_miou(preds, [p.mask for p in pages])


@dataclass
class TrainResult:
    model: Segmenter
    history: list[dict]
    best_epoch: int
    best_miou: float
    weights: np.ndarray


def train_segmenter(train: Sequence[LayoutPage], val: Sequence[LayoutPage],
                    cfg: SelfTrainConfig, init: Sequence[np.ndarray] | None = None,
                    seed_offset: int = 0) -> TrainResult:
    """Minibatch AdamW on class-weighted CE; keeps the best-val-mIoU weights.

    Stops after ``cfg.patience`` epochs without a val mIoU gain or at
    ``cfg.max_epochs``.
    """
    if len(train) < 1:
        raise ValueError("no training pages")
    if len(val) < 1:
        raise ValueError("degenerate split: empty validation set")
    model = Segmenter(cfg.model)
    if init is not None:
        model.load_state(init)
    weights = class_weights([p.mask for p in train], cfg.eps)
    params = model.params()
    rng = np.random.default_rng([cfg.seed, seed_offset])
    stopper = EarlyStopping(cfg.patience, "max")
    best_state = model.state()
    history = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            for p in params:
                p.zero_grad()
            used = []
            for page in batch:
                logits = model.logits(page.image, train=True)
                try:
                    loss, grad = weighted_ce(logits, page.mask, weights, cfg.background_weight,
                                             page.ignore)
                except EmptyPageError:
                    continue
                used.append(loss)
                model.backward(grad)
            if not used:
                continue
            for p in params:
                p.grad /= len(used)
            net.adamw_step(params, cfg.lr, weight_decay=cfg.weight_decay)
            losses.extend(used)
        miou = evaluate_pages(model, val)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                        "val_miou": miou})
        stop = stopper.step(miou, epoch)
        if stopper.improved:
            best_state = model.state()
        if stop:
            break
    model.load_state(best_state)
    return TrainResult(model, history, stopper.best_epoch, float(stopper.best), weights)


def split_labeled(pages: Sequence[LayoutPage], cfg: SelfTrainConfig):
    """Seeded shuffle, then test fraction off the top and val fraction off the rest."""
    order = np.random.default_rng(cfg.seed).permutation(len(pages))
    shuffled = [pages[i] for i in order]
    n_test = int(round(len(pages) * cfg.test_fraction))
    test, rest = shuffled[:n_test], shuffled[n_test:]
    n_val = max(1, int(round(len(rest) * cfg.val_fraction)))
    val, train = rest[:n_val], rest[n_val:]
    if not train or not val:
        raise ValueError(f"degenerate split of {len(pages)} labeled pages")
    return train, val, test


@dataclass
class SelfTrainResult:
    model: Segmenter
    baseline_model: Segmenter
    baseline_val_miou: float
    best_val_miou: float
    rounds: list[dict]
    train_set: list[LayoutPage]
    pool: list[LayoutPage]

    def report(self) -> dict:
        return {"baseline_val_miou": self.baseline_val_miou,
                "best_val_miou": self.best_val_miou,
                "rounds": self.rounds}


def pseudo_label(model: Segmenter, pool: Sequence[LayoutPage], cfg: SelfTrainConfig):
    """``(page with predicted mask, confidence)`` for every pool page, in stem order."""
    out = []
    for page in sorted(pool, key=lambda p: p.stem):
        mask, conf = predict_mask(model, page.image)
        score = avg_confidence(conf, mask, cfg.confidence_scope)
        ignore = None if cfg.pixel_threshold is None else conf < cfg.pixel_threshold
        out.append((LayoutPage(page.stem, page.image, mask, "pseudo", ignore), score))
    return out


def self_train(labeled: Sequence[LayoutPage], pool: Sequence[LayoutPage], cfg: SelfTrainConfig,
               val: Sequence[LayoutPage] | None = None,
               baseline: TrainResult | None = None) -> SelfTrainResult:
    """Supervised baseline, then rounds of pseudo-labelling and continued training.

    Each round labels the remaining pool with the current best model, moves
    pages whose average confidence reaches the threshold into the training
    set, and resumes training from the current weights. Rounds end when
    nothing is selected or val mIoU does not improve; the best-val model is
    returned. When ``val`` is None it is carved out of ``labeled``.
    """
    if not labeled:
        raise ValueError("empty labeled set")
    if val is None:
        train, val, _ = split_labeled(labeled, cfg)
    else:
        train = list(labeled)
    stems = {p.stem for p in train} | {p.stem for p in val}
    if stems & {p.stem for p in pool}:
        raise ValueError("labeled and unlabeled pools overlap")

    base = baseline or train_segmenter(train, val, cfg)
    best_model, best_val = base.model, base.best_miou
    train_set = [copy.copy(p) for p in train]
    remaining = list(pool)
    rounds = []
    for r in range(cfg.max_rounds):
        if not remaining:
            break
        scored = pseudo_label(best_model, remaining, cfg)
        chosen = [page for page, score in scored if score >= cfg.confidence_threshold]
        if not chosen:
            rounds.append({"round": r, "selected": [], "val_miou": best_val})
            break
        chosen_stems = {p.stem for p in chosen}
        train_set.extend(chosen)
        remaining = [p for p in remaining if p.stem not in chosen_stems]
        result = train_segmenter(train_set, val, cfg, init=best_model.state(), seed_offset=r + 1)
        rounds.append({"round": r, "selected": sorted(chosen_stems), "val_miou": result.best_miou})
        log.info("round %d: %d pages selected, val mIoU %.4f (best %.4f)",
                 r, len(chosen), result.best_miou, best_val)
        if result.best_miou > best_val:
            best_model, best_val = result.model, result.best_miou
        else:
            break
    return SelfTrainResult(best_model, base.model, base.best_miou, best_val, rounds,
                           train_set, remaining)


# ------------------------------------------------------------------ checkpoint

def save_segmenter(model: Segmenter, path, history=None, extra: dict | None = None) -> None:
    header = {"kind": "segmenter", "model": asdict(model.cfg), "history": history or []}
    header.update(extra or {})
    net.save_checkpoint(path, header, model.params())


def load_segmenter(path) -> tuple[Segmenter, dict]:
    header, arrays = net.load_checkpoint(path)
    if header.get("kind") != "segmenter":
        raise net.CheckpointError(f"{path}: not a segmenter checkpoint")
    model = Segmenter(SegmenterConfig(**header["model"]))
    model.load_state(arrays)
    return model, header


# ---------------------------------------------------------- synthetic benchmark

# page generator and self-training settings of the desk-scale benchmark
BENCHMARK_PAGE = {"style_spread": 40.0, "noise": 18.0}
BENCHMARK_SELF_TRAIN = {"lr": 1e-3, "background_weight": 0.1, "max_epochs": 100,
                        "pixel_threshold": 0.9, "model": SegmenterConfig(pools=0)}

# per-class ink colour, stroke height and line pitch
_STYLES = {
    1: ((70, 30, 20), 3, 5),
    2: ((40, 35, 30), 1, 3),
    5: ((120, 40, 40), 1, 2),
    8: ((30, 30, 90), 2, 3),
}


def synthetic_layout_page(rng: np.random.Generator, height: int = 32, width: int = 48,
                          classes: Sequence[int] = (1, 2, 5, 8), noise: float = 18.0,
                          style_spread: float = 40.0) -> tuple[np.ndarray, np.ndarray]:
    """Parchment page with rectangular text regions drawn as striped ink.

    Classes differ in ink colour, stroke thickness and line pitch. Every page
    draws its own paper tone and shifts each class colour by up to
    ``style_spread``, so a handful of pages covers the style space poorly.
    """
    seed = int(rng.integers(2 ** 31))
    bias = int(rng.integers(175, 235))
    bg = perlin_texture(width, height, NoiseParams(cell_scale=12, octaves=2, seed=seed,
                                                   bias=bias, amplitude=25))
    tint = np.array([1.0, rng.uniform(0.85, 1.0), rng.uniform(0.65, 0.95)])
    img = bg[:, :, None] * tint
    mask = np.zeros((height, width), dtype=np.uint8)
    regions = []
    if 1 in classes:
        regions.append((1, int(rng.integers(1, 4)), int(rng.integers(5, 8)),
                        int(rng.integers(6, 14)), int(rng.integers(26, 34))))
    body_top = max((r[1] + r[2] for r in regions), default=1) + int(rng.integers(2, 4))
    split = int(rng.integers(28, 35))
    if 2 in classes:
        regions.append((2, body_top, height - body_top - int(rng.integers(2, 8)),
                        int(rng.integers(2, 5)), split - int(rng.integers(2, 4))))
    if 5 in classes:
        top5 = body_top + int(rng.integers(0, 6))
        regions.append((5, top5, int(rng.integers(8, max(9, height - top5 - 8))),
                        split + 1, width - int(rng.integers(2, 5))))
    if 8 in classes:
        regions.append((8, height - int(rng.integers(5, 7)), 3,
                        split + 2 + int(rng.integers(0, 4)), width - int(rng.integers(2, 6))))
    sigma = noise * rng.uniform(0.6, 1.4)
    for label, top, h, x0, x1 in regions:
        colour, stroke, pitch = _STYLES[label]
        top = max(0, min(top, height - 1))
        bottom = min(height, top + max(h, 1))
        if x1 <= x0 or bottom <= top:
            continue
        # the region ends on its last full stroke so its extent is visible in the ink
        n_lines = max(1, (bottom - top - stroke) // pitch + 1)
        bottom = min(height, top + (n_lines - 1) * pitch + stroke)
        mask[top:bottom, x0:x1] = label
        ink = np.clip(np.array(colour) + rng.uniform(-style_spread, style_spread, size=3), 0, 255)
        for y in range(top, bottom, pitch):
            ys = slice(y, min(y + stroke, bottom))
            # broken strokes: words separated by random gaps, line ends always inked
            run = rng.random(x1 - x0) > 0.2
            run[[0, -1]] = True
            img[ys, x0:x1][:, run] = ink
    img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def synthetic_layout_set(n: int, seed: int, prefix: str, **kwargs) -> list[LayoutPage]:
    rng = np.random.default_rng(seed)
    pages = []
    for i in range(n):
        img, mask = synthetic_layout_page(rng, **kwargs)
        pages.append(LayoutPage(f"{prefix}{i:04d}", img, mask))
    return pages
