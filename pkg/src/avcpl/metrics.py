"""Word error rate with an explicit alignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class WerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    n_ref: int = 0
    by_mode: dict = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.n_ref == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.n_ref

    def __iadd__(self, other: "WerReport"):
        self.substitutions += other.substitutions
        self.insertions += other.insertions
        self.deletions += other.deletions
        self.n_ref += other.n_ref
        return self

    def as_row(self) -> dict:
        return {"wer": self.wer, "sub": self.substitutions, "ins": self.insertions,
                "del": self.deletions, "n_ref_words": self.n_ref}


def edit_table(ref, hyp) -> np.ndarray:
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ri != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    return d


def align(ref, hyp) -> list[tuple[str, object, object]]:
    """Levenshtein alignment as a list of (op, ref_word, hyp_word), op in {=, S, D, I}.

    Backtrace prefers the diagonal (match/substitution), then deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    d = edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("=" if ref[i - 1] == hyp[j - 1] else "S", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(("D", ref[i - 1], None))
            i -= 1
        else:
            ops.append(("I", None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def wer(ref, hyp) -> WerReport:
    ops = align(ref, hyp)
    return WerReport(
        substitutions=sum(op == "S" for op, _, _ in ops),
        insertions=sum(op == "I" for op, _, _ in ops),
        deletions=sum(op == "D" for op, _, _ in ops),
        n_ref=len(list(ref)),
    )
