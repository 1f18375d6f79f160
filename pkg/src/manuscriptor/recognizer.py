"""CRNN line recogniser: convolutional features, height pooling, BiLSTM,
per-frame log-softmax, trained with CTC."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ctc, metrics, net
from .raster import blackout_from, load_png, pad_right, resize_height

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    target_height: int = 32
    batch_size: int = 8
    lr: float = 0.001
    weight_decay: float = 0.01
    early_stop_patience: int = 5
    min_delta: float = 0.0
    max_epochs: int = 50
    seed: int = 42
    train_fraction: float = 0.8
    test_holdout: int = 100
    normalize_by_target_len: bool = False
    blackout: bool = True
    rtl: bool = True
    grad_clip: float | None = 5.0
    net: net.NetConfig = field(default_factory=net.NetConfig)

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = net.NetConfig(**self.net)
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")


@dataclass
class Sample:
    image: np.ndarray
    text: str
    key: str = ""


def load_samples(records: Sequence[dict]) -> list[Sample]:
    out = []
    for r in records:
        img = load_png(r["path"])
        if img.ndim == 3:
            img = np.rint(img @ np.array([0.299, 0.587, 0.114])).astype(np.uint8)
        out.append(Sample(img, r["text"], r.get("image", r["path"])))
    return out


def build_alphabet(texts: Sequence[str]) -> ctc.Alphabet:
    """Sorted unique characters of all texts."""
    texts = list(texts)
    if not texts:
        raise ValueError("empty manifest")
    return ctc.Alphabet(sorted(set("".join(texts))))


def preprocess_batch(images: Sequence[np.ndarray], target_height: int = 32,
                     blackout: bool = True, rtl: bool = False) -> tuple[np.ndarray, list[int]]:
    """Resize to a common height, pad right with white to the widest image,
    black out the padding, scale to [0, 1]. Returns ``(B, 1, H, Wmax)`` and the
    pre-padding widths.

    With ``rtl`` each line is mirrored first, so frames run in reading order
    for right-to-left scripts.
    """
    resized = []
    for im in images:
        if im.size == 0:
            raise ValueError("zero-sized image")
        r = resize_height(im, target_height, "bilinear")
        resized.append(r[:, ::-1] if rtl else r)
    w_max = max(r.shape[1] for r in resized)
    batch = np.empty((len(resized), 1, target_height, w_max))
    widths = []
    for i, r in enumerate(resized):
        padded, start = pad_right(r, w_max, 255)
        if blackout:
            padded = blackout_from(padded, start)
        batch[i, 0] = padded / 255.0
        widths.append(start)
    return batch, widths


class CRNN:
    def __init__(self, cfg: net.NetConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        layers = []
        c_in = 1
        self.width_factor = 1
        for i, (c_out, k, stride, pool) in enumerate(cfg.conv_spec):
            layers += [net.Conv2d(c_in, c_out, k, rng, stride=stride, name=f"conv{i}"), net.ReLU()]
            pool = (pool, pool) if isinstance(pool, int) else tuple(pool)
            if pool != (1, 1):
                layers.append(net.MaxPool2d(pool))
            self.width_factor *= stride * pool[1]
            c_in = c_out
        layers[0].input_grad = False
        self.features = net.Sequential(layers)
        self.head = net.Sequential([
            net.HeightPool(),
            net.Dropout(cfg.dropout_p, seed=cfg.seed + 1),
            net.BiLSTM(c_in, cfg.hidden_size, rng, name="rnn"),
            net.Dropout(cfg.dropout_p, seed=cfg.seed + 2),
            net.Linear(2 * cfg.hidden_size, cfg.num_classes, rng, name="classifier"),
            net.LogSoftmax(),
        ])
        self.body = net.Sequential([self.features, self.head])

    def params(self):
        return self.body.params()

    def forward(self, x, train=False):
        """``(B, 1, H, W)`` images to ``(B, T, C)`` log-probabilities."""
        return self.body.forward(x, train)

    def backward(self, grad):
        return self.body.backward(grad)

    def frames(self, width: int) -> int:
        return width // self.width_factor

    def state(self):
        return [p.value.copy() for p in self.params()]

    def load_state(self, arrays):
        net.assign_params(self.params(), arrays)


@dataclass
class Recognizer:
    model: CRNN
    alphabet: ctc.Alphabet
    target_height: int = 32
    blackout: bool = True
    rtl: bool = True

    def log_probs(self, image: np.ndarray) -> np.ndarray:
        x, _ = preprocess_batch([image], self.target_height, self.blackout, self.rtl)
        return self.model.forward(x)[0]


def make_recognizer(alphabet: ctc.Alphabet, cfg: TrainConfig) -> Recognizer:
    net_cfg = net.NetConfig(**{**asdict(cfg.net), "num_classes": alphabet.num_classes})
    return Recognizer(CRNN(net_cfg), alphabet, cfg.target_height, cfg.blackout, cfg.rtl)


def split_indices(n: int, cfg: TrainConfig) -> tuple[list[int], list[int], list[int]]:
    """Seeded shuffle; the first ``test_holdout`` go to test (capped at a fifth
    of the data), the rest split ``train_fraction`` : remainder."""
    order = np.random.default_rng(cfg.seed).permutation(n).tolist()
    n_test = min(cfg.test_holdout, n // 5)
    test, rest = order[:n_test], order[n_test:]
    n_train = int(round(len(rest) * cfg.train_fraction))
    n_train = min(max(n_train, 1), len(rest) - 1) if len(rest) > 1 else len(rest)
    return rest[:n_train], rest[n_train:], test


def batch_loss(rec: Recognizer, samples: Sequence[Sample], train: bool,
               normalize_by_target_len: bool = False):
    """Forward one batch; returns (mean loss, grad wrt log-probs or None, used, skipped)."""
    x, _ = preprocess_batch([s.image for s in samples], rec.target_height, rec.blackout, rec.rtl)
    out = rec.model.forward(x, train)
    T = out.shape[1]
    used, targets = [], []
    skipped = 0
    for b, s in enumerate(samples):
        tgt = rec.alphabet.encode(s.text)
        if not tgt or T < ctc.min_frames(tgt):
            skipped += 1
            continue
        used.append(b)
        targets.append(tgt)
    if not used:
        return None, None, 0, skipped
    loss, grads = ctc.ctc_batch_loss(out[used], targets, normalize_by_target_len)
    full = np.zeros_like(out)
    full[used] = grads
    return loss, full, len(used), skipped


def mean_loss(rec: Recognizer, samples: Sequence[Sample], batch_size: int,
              normalize_by_target_len: bool = False) -> float:
    total, count = 0.0, 0
    for i in range(0, len(samples), batch_size):
        loss, _, used, _ = batch_loss(rec, samples[i:i + batch_size], False, normalize_by_target_len)
        if used:
            total += loss * used
            count += used
    return total / count if count else float("nan")


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to improve on the best value."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    recognizer: Recognizer
    history: list[dict]
    best_epoch: int
    skipped: int
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


def train(samples: Sequence[Sample], cfg: TrainConfig, out: str | Path | None = None,
          alphabet: ctc.Alphabet | None = None,
          val_loss_hook: Callable[[int, float], float] | None = None) -> TrainResult:
    """Train a CRNN with CTC and AdamW, early-stopping on validation loss.

    ``val_loss_hook(epoch, loss)`` may replace the measured validation loss
    (used to exercise the stopping rule). The best-validation weights are
    restored and, when ``out`` is given, written as a checkpoint.
    """
    samples = list(samples)
    if len(samples) < 10:
        raise ValueError("need at least 10 samples to train")
    alphabet = alphabet or build_alphabet([s.text for s in samples])
    for s in samples:
        alphabet.encode(s.text)
    tr_idx, va_idx, te_idx = split_indices(len(samples), cfg)
    train_set = [samples[i] for i in tr_idx]
    val_set = [samples[i] for i in va_idx]
    test_set = [samples[i] for i in te_idx]

    rec = make_recognizer(alphabet, cfg)
    params = rec.model.params()
    rng = np.random.default_rng([cfg.seed, 1])
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    best_state = rec.model.state()
    history = []
    skipped_total = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_set))
        losses, skipped = [], 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            for p in params:
                p.zero_grad()
            loss, grad, used, sk = batch_loss(rec, batch, True, cfg.normalize_by_target_len)
            skipped += sk
            if not used:
                continue
            rec.model.backward(grad)
            if cfg.grad_clip:
                net.clip_grad_norm(params, cfg.grad_clip)
            net.adamw_step(params, cfg.lr, weight_decay=cfg.weight_decay)
            losses.append(loss)
        if epoch == 0:
            skipped_total = skipped
            if skipped:
                log.warning("%d training samples need more frames than the model emits; skipped",
                            skipped)
        val_loss = mean_loss(rec, val_set, cfg.batch_size, cfg.normalize_by_target_len) \
            if val_set else float(np.mean(losses))
        if val_loss_hook is not None:
            val_loss = float(val_loss_hook(epoch, val_loss))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                        "val_loss": val_loss})
        log.info("epoch %d train %.4f val %.4f", epoch, history[-1]["train_loss"] or 0.0, val_loss)
        stop = stopper.step(val_loss, epoch)
        if stopper.best_epoch == epoch:
            best_state = rec.model.state()
        if stop:
            break
    rec.model.load_state(best_state)
    result = TrainResult(rec, history, stopper.best_epoch, skipped_total,
                         train_set, val_set, test_set)
    if out is not None:
        save_recognizer(rec, out, cfg, history, stopper.best_epoch,
                        split={"train": [s.key for s in train_set], "val": [s.key for s in val_set],
                               "test": [s.key for s in test_set]},
                        skipped=skipped_total)
    return result


def save_recognizer(rec: Recognizer, path, cfg: TrainConfig, history=(), best_epoch=-1,
                    split=None, skipped=0) -> None:
    header = {
        "kind": "recognizer",
        "alphabet": "".join(rec.alphabet.symbols),
        "net": asdict(rec.model.cfg),
        "train": asdict(cfg),
        "history": list(history),
        "best_epoch": best_epoch,
        "split": split or {},
        "skipped": skipped,
    }
    net.save_checkpoint(path, header, rec.model.params())


def load_recognizer(path) -> tuple[Recognizer, dict]:
    header, arrays = net.load_checkpoint(path)
    if header.get("kind") != "recognizer":
        raise net.CheckpointError(f"{path}: not a recogniser checkpoint")
    try:
        alphabet = ctc.Alphabet(tuple(header["alphabet"]))
        model = CRNN(net.NetConfig(**header["net"]))
        train_cfg = header["train"]
    except (KeyError, TypeError, ValueError) as exc:
        raise net.CheckpointError(f"{path}: corrupt header ({exc})") from exc
    model.load_state(arrays)
    rec = Recognizer(model, alphabet, train_cfg["target_height"], train_cfg["blackout"],
                     train_cfg.get("rtl", True))
    return rec, header


def transcribe(rec: Recognizer, image: np.ndarray, decode: str = "greedy",
               beam_width: int = 8) -> str:
    lp = rec.log_probs(image)
    if decode == "greedy":
        return ctc.greedy_decode(lp, rec.alphabet)
    if decode == "beam":
        return ctc.beam_decode(lp, rec.alphabet, beam_width)
    raise ValueError(f"unknown decode mode {decode!r}")


@dataclass
class EvalReport:
    loss: float
    cer: float
    wer: float
    samples: list[dict]

    def to_json(self) -> dict:
        return {"loss": self.loss, "cer": self.cer, "wer": self.wer, "samples": self.samples}


def evaluate(rec: Recognizer, samples: Sequence[Sample], decode: str = "greedy",
             beam_width: int = 8, transcripts_path=None,
             normalize_by_target_len: bool = False) -> EvalReport:
    """Mean CTC loss and corpus CER/WER, one image at a time (no batch padding)."""
    rows, losses = [], []
    for s in samples:
        lp = rec.log_probs(s.image)
        tgt = rec.alphabet.encode(s.text) if all(c in rec.alphabet.symbols for c in s.text) else None
        if tgt and lp.shape[0] >= ctc.min_frames(tgt):
            loss, _ = ctc.ctc_loss(lp, tgt)
            losses.append(loss / len(tgt) if normalize_by_target_len else loss)
        if decode == "greedy":
            pred = ctc.greedy_decode(lp, rec.alphabet)
        else:
            pred = ctc.beam_decode(lp, rec.alphabet, beam_width)
        rows.append({"key": s.key, "text": s.text, "pred": pred})
    pairs = [(r["pred"], r["text"]) for r in rows]
    report = EvalReport(float(np.mean(losses)) if losses else float("nan"),
                        metrics.corpus_cer(pairs), metrics.corpus_wer(pairs), rows)
    if transcripts_path is not None:
        with open(transcripts_path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, ensure_ascii=False) + "\n")
    return report


# ------------------------------------------------------------- gradient gate

def _linear_probe(shape, rng):
    r = rng.normal(size=shape)
    return lambda out: (float((out * r).sum()), r)


def gradient_gate(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Finite-difference check of every layer and of a small conv, BiLSTM,
    log-softmax and CTC stack. Returns the worst relative error per check."""
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(2, 2, 6, 8))
    seq = rng.normal(size=(2, 5, 3))
    cases = {
        "conv2d": (net.Conv2d(2, 3, 3, rng), img),
        "conv2d_stride2": (net.Conv2d(2, 3, 3, rng, stride=2, padding=1), rng.normal(size=(2, 2, 5, 7))),
        "relu": (net.ReLU(), img),
        "maxpool": (net.MaxPool2d(2), img),
        "heightpool": (net.HeightPool(), img),
        "upsample": (net.Upsample(2), img),
        "linear": (net.Linear(3, 4, rng), seq),
        "log_softmax": (net.LogSoftmax(), seq),
        "dropout": (net.Dropout(0.2, seed=seed), seq),
        "lstm": (net.LSTM(3, 4, rng), seq),
        "bilstm": (net.BiLSTM(3, 4, rng), seq),
    }
    report = {}
    for name, (layer, x) in cases.items():
        probe = _linear_probe(layer.forward(x).shape, rng)
        report[name] = net.grad_check(layer, x, probe, eps, include_input=True)

    n_classes = 4
    stack = net.Sequential([
        net.Conv2d(1, 3, 3, rng), net.ReLU(), net.MaxPool2d(2), net.HeightPool(),
        net.BiLSTM(3, 4, rng), net.Linear(8, n_classes, rng), net.LogSoftmax(),
    ])
    x = rng.normal(size=(2, 1, 6, 12))
    targets = [[1, 2], [3, 3]]
    report["composite_ctc"] = net.grad_check(
        stack, x, lambda out: ctc.ctc_batch_loss(out, targets), eps, include_input=True)
    return report
