"""Edit-distance metrics: Levenshtein distance and ratio, CER and WER."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class EditCosts:
    insert: float = 1
    delete: float = 1
    substitute: float = 1

    def __post_init__(self):
        if min(self.insert, self.delete, self.substitute) < 0:
            raise ValueError("edit costs must be non-negative")


UNIT = EditCosts()


def levenshtein(a: Sequence, b: Sequence, costs: EditCosts = UNIT):
    """Minimal cost to turn ``a`` into ``b``.

    Works on any sequences (strings compare by code point, token lists by
    token). Returns an int for integer costs.
    """
    ins, dele, sub = costs.insert, costs.delete, costs.substitute
    prev = [j * ins for j in range(len(b) + 1)]
    for i, ca in enumerate(a, 1):
        cur = [i * dele]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + dele,
                           cur[j - 1] + ins,
                           prev[j - 1] + (0 if ca == cb else sub)))
        prev = cur
    return prev[-1]


def lev_ratio(a: Sequence, b: Sequence, ratio_mode: str = "max") -> float:
    """Similarity in [0, 1]; 1.0 means identical.

    ``max``:   1 - d / max(|a|, |b|) with unit costs.
    ``indel``: (|a| + |b| - d2) / (|a| + |b|) where substitutions cost 2.
    """
    n = len(a) + len(b)
    if n == 0:
        return 1.0
    if ratio_mode == "max":
        return 1.0 - levenshtein(a, b) / max(len(a), len(b))
    if ratio_mode == "indel":
        return (n - levenshtein(a, b, EditCosts(1, 1, 2))) / n
    raise ValueError(f"unknown ratio_mode {ratio_mode!r}")


def mean_lev_ratio(pairs, ratio_mode: str = "max") -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no samples")
    return sum(lev_ratio(p, g, ratio_mode) for p, g in pairs) / len(pairs)


def cer(pred: str, gt: str) -> float:
    if len(gt) == 0:
        raise ValueError("empty ground truth")
    return levenshtein(pred, gt) / len(gt)


def wer(pred: str, gt: str) -> float:
    ref = gt.split()
    if not ref:
        raise ValueError("empty ground truth")
    return levenshtein(pred.split(), ref) / len(ref)


def corpus_cer(pairs) -> float:
    """Sum of character distances over sum of reference lengths."""
    dist = total = 0
    for pred, gt in pairs:
        dist += levenshtein(pred, gt)
        total += len(gt)
    if total == 0:
        raise ValueError("empty ground truth")
    return dist / total


def corpus_wer(pairs) -> float:
    dist = total = 0
    for pred, gt in pairs:
        ref = gt.split()
        dist += levenshtein(pred.split(), ref)
        total += len(ref)
    if total == 0:
        raise ValueError("empty ground truth")
    return dist / total
