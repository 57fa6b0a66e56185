"""CTC loss, greedy decoding and a brute-force enumeration oracle.

All dynamic programming is done in float64 log space. Gradients are taken
with respect to the log-probability lattice; composing with the
``log_softmax`` backward gives the usual ``softmax - occupancy`` form.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tn

NEG_INF = -np.inf


class InfeasibleTarget(ValueError):
    """The target cannot be emitted within the available number of frames."""


@dataclass(frozen=True)
class TokenSet:
    """Character output units: blank, word boundary, apostrophe, letters, digits."""

    blank: str = "<b>"
    boundary: str = "|"
    apostrophe: str = "'"
    chars: str = "abcdefghijklmnopqrstuvwxyz0123456789"

    @property
    def symbols(self) -> list[str]:
        return [self.blank, self.boundary, self.apostrophe] + list(self.chars)

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def boundary_id(self) -> int:
        return 1

    def __len__(self):
        return 3 + len(self.chars)

    def index(self, sym: str) -> int:
        return self._lookup()[sym]

    def _lookup(self) -> dict:
        return _symbol_table(self)

    def encode_text(self, text: str) -> list[int]:
        """Words separated by spaces -> ids with the boundary token between words."""
        table = self._lookup()
        ids = []
        for i, word in enumerate(text.split()):
            if i:
                ids.append(self.boundary_id)
            for ch in word:
                if ch not in table or table[ch] in (self.blank_id, self.boundary_id):
                    raise ValueError(f"character {ch!r} in {word!r} is not a word token")
                ids.append(table[ch])
        return ids

    def decode_ids(self, ids) -> str:
        syms = self.symbols
        words, cur = [], []
        for i in ids:
            if i == self.boundary_id:
                if cur:
                    words.append("".join(cur))
                cur = []
            elif i != self.blank_id:
                cur.append(syms[i])
        if cur:
            words.append("".join(cur))
        return " ".join(words)


@lru_cache(maxsize=None)
def _symbol_table(ts: TokenSet) -> dict:
    return {s: i for i, s in enumerate(ts.symbols)}


def _check_feasible(target, T: int):
    U = len(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    if U + repeats > T:
        raise InfeasibleTarget(f"target of length {U} with {repeats} repeats needs more than {T} frames")


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(s), NEG_INF)


def ctc_loss_batch(lattice: np.ndarray, lengths, targets, blank: int = 0):
    """Batched CTC.

    lattice: (B, T, V) log-probs; lengths: frames per item; targets: list of id lists.
    Returns (nll (B,), grad (B, T, V)) with grad = d nll / d lattice.
    """
    lp = np.asarray(lattice, dtype=np.float64)
    B, T, V = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    for b, tgt in enumerate(targets):
        if lengths[b] < 1 or lengths[b] > T:
            raise ValueError(f"item {b}: length {lengths[b]} outside 1..{T}")
        _check_feasible(tgt, int(lengths[b]))
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    n_states = np.zeros(B, dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1:2 * len(tgt):2] = tgt
        n_states[b] = 2 * len(tgt) + 1
    valid_state = np.arange(S)[None, :] < n_states[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid_state

    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid_state[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        s1 = np.concatenate([np.full((B, 1), NEG_INF), prev[:, :-1]], axis=1)
        s2 = np.concatenate([np.full((B, 2), NEG_INF), prev[:, :-2]], axis=1)[:, :S]
        s2 = np.where(skip, s2, NEG_INF)
        alpha[:, t] = _logsumexp3(prev, s1, s2) + emit[:, t]

    beta = np.full((B, T, S), NEG_INF)
    last = lengths - 1
    bi = np.arange(B)
    beta[bi, last, n_states - 1] = emit[bi, last, n_states - 1]
    has2 = n_states > 1
    beta[bi[has2], last[has2], n_states[has2] - 2] = emit[bi[has2], last[has2], n_states[has2] - 2]
    skip_next = np.zeros((B, S), dtype=bool)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1]
        n1 = np.concatenate([nxt[:, 1:], np.full((B, 1), NEG_INF)], axis=1)
        n2 = np.concatenate([nxt[:, 2:], np.full((B, 2), NEG_INF)], axis=1)[:, :S]
        n2 = np.where(skip_next, n2, NEG_INF)
        rec = _logsumexp3(nxt, n1, n2) + emit[:, t]
        active = (t < last)[:, None]
        beta[:, t] = np.where(active, rec, beta[:, t])

    a_end = alpha[bi, last, n_states - 1]
    a_end2 = np.where(has2, alpha[bi, last, np.maximum(n_states - 2, 0)], NEG_INF)
    logp = np.logaddexp(a_end, a_end2)
    nll = -logp

    with np.errstate(invalid="ignore"):
        log_occ = alpha + beta - emit - logp[:, None, None]
    occ = np.where(np.isfinite(log_occ), np.exp(log_occ), 0.0)
    onehot = np.zeros((B, S, V))
    onehot[bi[:, None], np.arange(S)[None, :], ext] = valid_state
    grad = -np.einsum("bts,bsv->btv", occ, onehot)
    tmask = np.arange(T)[None, :] < lengths[:, None]
    grad *= tmask[:, :, None]
    return nll, grad


def ctc_loss(lattice: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` under a (T, V) log-prob lattice, and its gradient."""
    lat = np.asarray(lattice, dtype=np.float64)
    if lat.ndim != 2:
        raise ValueError(f"lattice must be (T, V), got {lat.shape}")
    nll, grad = ctc_loss_batch(lat[None], [lat.shape[0]], [list(target)])
    return float(nll[0]), grad[0]


def ctc_loss_op(log_probs: tn.Tensor, lengths, targets) -> tn.Tensor:
    """Tape operator: per-item CTC NLL vector of shape (B,)."""
    nll, grad = ctc_loss_batch(log_probs.data, lengths, targets)

    def backward(g):
        return ((grad * g[:, None, None]).astype(log_probs.dtype),)
    return tn.custom_op("ctc_loss", (log_probs,), nll.astype(log_probs.dtype), backward)


# ---------------------------------------------------------------- brute force oracle

_BRUTE_MAX_T = 8
_BRUTE_MAX_V = 5


@lru_cache(maxsize=64)
def _path_codes(T: int, V: int, blank: int):
    paths = np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64).reshape(-1, T)
    code = np.zeros(len(paths), dtype=np.int64)
    prev = np.full(len(paths), -1, dtype=np.int64)
    for t in range(T):
        tok = paths[:, t]
        keep = (tok != blank) & (tok != prev)
        code = np.where(keep, code * (V + 1) + tok + 1, code)
        prev = tok
    return paths, code


def _label_code(target, V: int) -> int:
    code = 0
    for tok in target:
        code = code * (V + 1) + tok + 1
    return code


def ctc_brute_force(lattice: np.ndarray, target, blank: int = 0) -> float:
    """Sum path probabilities over every frame labelling that collapses to ``target``."""
    lat = np.asarray(lattice, dtype=np.float64)
    T, V = lat.shape
    if T > _BRUTE_MAX_T or V > _BRUTE_MAX_V:
        raise ValueError(f"instance too large for enumeration: T={T}, V={V}")
    paths, codes = _path_codes(T, V, blank)
    sel = codes == _label_code(target, V)
    if not sel.any():
        return float("inf")
    lp = lat[np.arange(T)[None, :], paths[sel]].sum(axis=1)
    m = lp.max()
    if not np.isfinite(m):
        return float("inf")
    return float(-(m + np.log(np.exp(lp - m).sum())))


# ---------------------------------------------------------------- decoding

def ctc_greedy_decode(lattice: np.ndarray, blank: int = 0) -> list[int]:
    """Frame argmax (lowest id wins ties), collapse repeats, drop blanks."""
    best = np.argmax(np.asarray(lattice), axis=-1)
    out = []
    prev = -1
    for tok in best.tolist():
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out
