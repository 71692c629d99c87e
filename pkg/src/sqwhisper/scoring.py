"""Edit-distance error rate with substitution/deletion/insertion counts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class WERResult:
    rate: float
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    empty_reference: bool = False

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def edit_counts(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(S, D, I) of a minimum-cost alignment.

    Among alignments of equal total cost the one with the fewest errors by
    (total, deletions) in lexicographic order is chosen, so counts are unique.
    """
    n, m = len(ref), len(hyp)
    # cell = (total, deletions, substitutions, insertions)
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0, 0)] + [None] * m
        for j in range(1, m + 1):
            e, d, s, ins = prev[j - 1]
            sub_cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            diag = (e + sub_cost, d, s + sub_cost, ins)
            e, d, s, ins = prev[j]
            up = (e + 1, d + 1, s, ins)
            e, d, s, ins = cur[j - 1]
            left = (e + 1, d, s, ins + 1)
            cur[j] = min(diag, up, left, key=lambda c: (c[0], c[1]))
        prev = cur
    _, d, s, ins = prev[m]
    return s, d, ins


def wer(ref, hyp) -> WERResult:
    """Error rate (S + D + I) / len(ref).

    An empty reference divides by 1 instead, and the result is flagged.
    """
    ref, hyp = _tokens(ref), _tokens(hyp)
    s, d, i = edit_counts(ref, hyp)
    denom = max(len(ref), 1)
    return WERResult((s + d + i) / denom, s, d, i, len(ref), len(ref) == 0)


def corpus_wer(refs, hyps) -> WERResult:
    """Pooled rate: total errors over total reference tokens."""
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis lists differ in length")
    s = d = i = n = 0
    for r, h in zip(refs, hyps):
        res = wer(r, h)
        s, d, i, n = s + res.substitutions, d + res.deletions, i + res.insertions, n + res.ref_len
    return WERResult((s + d + i) / max(n, 1), s, d, i, n, n == 0)
