"""Connectionist Temporal Classification.

Everything works on a ``(T, C)`` matrix of per-frame log-probabilities with the
blank at class index 0. ``ctc_loss`` runs the forward-backward recursions in
log space and returns the gradient with respect to the log-probabilities;
``brute_force_ctc`` enumerates every frame path and exists to check it.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

BLANK = 0
NEG_INF = -np.inf


class CTCError(ValueError):
    pass


class InfeasibleTargetError(CTCError):
    """Target needs more frames than the sequence has."""


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if not self.symbols:
            raise ValueError("alphabet must be non-empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    def encode(self, text: str) -> list[int]:
        index = {s: i + 1 for i, s in enumerate(self.symbols)}
        try:
            return [index[ch] for ch in text]
        except KeyError as exc:
            raise CTCError(f"character {exc.args[0]!r} not in alphabet") from None

    def decode(self, labels: Sequence[int]) -> str:
        return "".join(self.symbols[i - 1] for i in labels)


def _check_lp(lp) -> np.ndarray:
    lp = np.asarray(lp, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
        raise CTCError(f"log-probabilities must be (T>=1, C>=2), got {lp.shape}")
    return lp


def min_frames(target: Sequence[int]) -> int:
    """Frames needed: one per label plus one blank between each adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def _logsumexp(a: np.ndarray, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(s, axis=axis) if axis is not None else float(s.reshape(()))


def ctc_loss(lp, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``lp``."""
    lp = _check_lp(lp)
    target = [int(t) for t in target]
    T, C = lp.shape
    if not target:
        raise CTCError("target must contain at least one label")
    if any(t <= 0 or t >= C for t in target):
        raise CTCError(f"target labels must lie in 1..{C - 1}")
    if T < min_frames(target):
        raise InfeasibleTargetError(
            f"{T} frames cannot emit a target needing {min_frames(target)}")

    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    S = len(ext)
    # a label state may skip the preceding blank unless it repeats the label before it
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]

    emit = lp[:, ext]  # (T, S)
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), jump) + emit[t]

    # beta[t, s]: log-prob of emitting the rest of the target after frame t from state s
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    beta[T - 1, S - 2] = 0.0
    skip_next = np.concatenate((skip[2:], [False, False]))
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        jump = np.where(skip_next, np.concatenate((nxt[2:], [NEG_INF, NEG_INF])), NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), jump)

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(log_p):
        raise InfeasibleTargetError("target has zero probability under these log-probabilities")

    post = alpha + beta - log_p  # log posterior of occupying state s at t
    grad = np.zeros((T, C))
    for k in np.unique(ext):
        cols = post[:, ext == k]
        grad[:, k] = -np.exp(_logsumexp(cols, axis=1))
    return float(-log_p), grad


def ctc_loss_batched(lp: np.ndarray, targets: Sequence[Sequence[int]]):
    """:func:`ctc_loss` for a ``(B, T, C)`` stack sharing one frame count.

    Targets are padded to a common extended length; padded states are
    unreachable. Returns per-sample losses ``(B,)`` and gradients ``(B, T, C)``.
    """
    lp = np.asarray(lp, dtype=np.float64)
    B, T, C = lp.shape
    targets = [[int(t) for t in tgt] for tgt in targets]
    for tgt in targets:
        if not tgt:
            raise CTCError("target must contain at least one label")
        if any(t <= 0 or t >= C for t in tgt):
            raise CTCError(f"target labels must lie in 1..{C - 1}")
        if T < min_frames(tgt):
            raise InfeasibleTargetError(
                f"{T} frames cannot emit a target needing {min_frames(tgt)}")
    S = 2 * max(len(t) for t in targets) + 1
    ext = np.zeros((B, S), dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    skip = np.zeros((B, S), dtype=bool)
    last = np.zeros(B, dtype=np.int64)
    for b, tgt in enumerate(targets):
        n = 2 * len(tgt) + 1
        ext[b, 1:n:2] = tgt
        valid[b, :n] = True
        skip[b, 3:n:2] = ext[b, 3:n:2] != ext[b, 1:n - 2:2]
        last[b] = n - 1
    rows = np.arange(B)
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, NEG_INF)  # (B, T, S)

    ninf1 = np.full((B, 1), NEG_INF)
    ninf2 = np.full((B, 2), NEG_INF)
    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        step = np.concatenate((ninf1, prev[:, :-1]), axis=1)
        jump = np.where(skip, np.concatenate((ninf2, prev[:, :-2]), axis=1), NEG_INF)
        alpha[:, t] = np.logaddexp(np.logaddexp(prev, step), jump) + emit[:, t]

    skip_next = np.concatenate((skip[:, 2:], np.zeros((B, 2), dtype=bool)), axis=1)
    beta = np.full((B, T, S), NEG_INF)
    beta[rows, T - 1, last] = 0.0
    beta[rows, T - 1, last - 1] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        step = np.concatenate((nxt[:, 1:], ninf1), axis=1)
        jump = np.where(skip_next, np.concatenate((nxt[:, 2:], ninf2), axis=1), NEG_INF)
        beta[:, t] = np.logaddexp(np.logaddexp(nxt, step), jump)

    log_p = np.logaddexp(alpha[rows, T - 1, last], alpha[rows, T - 1, last - 1])
    if not np.all(np.isfinite(log_p)):
        raise InfeasibleTargetError("target has zero probability under these log-probabilities")
    post = np.exp(alpha + beta - log_p[:, None, None])  # (B, T, S); zero on padding
    grad = np.zeros((B, T, C))
    b_idx = np.broadcast_to(rows[:, None, None], post.shape)
    t_idx = np.broadcast_to(np.arange(T)[None, :, None], post.shape)
    c_idx = np.broadcast_to(ext[:, None, :], post.shape)
    np.add.at(grad, (b_idx, t_idx, c_idx), -post)
    return -log_p, grad


def ctc_batch_loss(lps, targets: Sequence[Sequence[int]],
                   normalize_by_target_len: bool = False):
    """Mean loss over a ``(B, T, C)`` batch and the gradient of that mean."""
    losses, grads = ctc_loss_batched(np.asarray(lps), targets)
    n = len(targets)
    if normalize_by_target_len:
        lengths = np.array([len(t) for t in targets], dtype=np.float64)
        losses = losses / lengths
        grads = grads / lengths[:, None, None]
    return float(losses.sum() / n), grads / n


def brute_force_ctc(lp, target: Sequence[int], max_paths: int = 10 ** 6) -> float:
    """Loss by summing the probability of every collapsing path (C^T of them)."""
    lp = _check_lp(lp)
    T, C = lp.shape
    if C ** T > max_paths:
        raise CTCError(f"{C}^{T} paths exceed the enumeration limit {max_paths}")
    target = [int(t) for t in target]
    if not target:
        raise CTCError("target must contain at least one label")
    if T < min_frames(target):
        raise InfeasibleTargetError(
            f"{T} frames cannot emit a target needing {min_frames(target)}")
    total = 0.0
    rows = range(T)
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == target:
            total += math.exp(sum(lp[t, k] for t, k in zip(rows, path)))
    if total == 0.0:
        raise InfeasibleTargetError("target has zero probability under these log-probabilities")
    return -math.log(total)


def label_probabilities(lp) -> dict[tuple[int, ...], float]:
    """Exhaustive map label sequence -> total probability (tiny instances only)."""
    lp = _check_lp(lp)
    T, C = lp.shape
    out: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(C), repeat=T):
        lab = tuple(collapse(path))
        out[lab] = out.get(lab, 0.0) + math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    return out


def greedy_decode(lp, alphabet: Alphabet) -> str:
    lp = _check_lp(lp)
    return alphabet.decode(collapse(np.argmax(lp, axis=1).tolist()))


def label_log_prob(lp, labels: Sequence[int]) -> float:
    """Exact log-probability of a label sequence (including the empty one)."""
    lp = _check_lp(lp)
    if not labels:
        return float(np.sum(lp[:, BLANK]))
    if lp.shape[0] < min_frames(labels):
        return -math.inf
    try:
        loss, _ = ctc_loss(lp, labels)
    except InfeasibleTargetError:
        return -math.inf
    return -loss


def prefix_beam_search(lp, beam_width: int) -> list[tuple[tuple[int, ...], float]]:
    """Prefix beam search; returns (labels, log-prob) for retained prefixes, best first."""
    lp = _check_lp(lp)
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    T, C = lp.shape
    # prefix -> (log p ending in blank, log p ending in non-blank)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def add(prefix, pb, pnb):
            cur = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            cur[0] = np.logaddexp(cur[0], pb)
            cur[1] = np.logaddexp(cur[1], pnb)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            add(prefix, total + row[BLANK], NEG_INF)
            last = prefix[-1] if prefix else None
            for k in range(1, C):
                if row[k] == NEG_INF:
                    continue
                if k == last:
                    # repeat without blank stays on this prefix; after a blank it extends
                    add(prefix, NEG_INF, pnb + row[k])
                    add(prefix + (k,), NEG_INF, pb + row[k])
                else:
                    add(prefix + (k,), NEG_INF, total + row[k])
        scored = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {p: (v[0], v[1]) for p, v in scored[:beam_width]}
    out = [(p, float(np.logaddexp(*v))) for p, v in beams.items()]
    out.sort(key=lambda kv: (-kv[1], kv[0]))
    return out


def beam_decode(lp, alphabet: Alphabet, beam_width: int) -> str:
    """Best label sequence among the prefixes kept by a prefix beam search.

    Surviving prefixes are rescored with their exact probability before the
    final pick, so pruning losses along the way cannot reorder them.
    """
    labels, _ = best_beam_label(lp, beam_width)
    return alphabet.decode(labels)


def best_beam_label(lp, beam_width: int) -> tuple[tuple[int, ...], float]:
    lp = _check_lp(lp)
    candidates = prefix_beam_search(lp, beam_width)
    rescored = [(p, label_log_prob(lp, p)) for p, _ in candidates]
    rescored.sort(key=lambda kv: (-kv[1], kv[0]))
    return rescored[0]
