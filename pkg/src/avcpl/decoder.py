"""Lexicon-constrained CTC prefix beam search with word n-gram shallow fusion.

Hypotheses are collapsed token prefixes walking a character trie built from
the lexicon. Each keeps separate log scores for paths ending in blank and in
a non-blank token, so repeats collapse exactly. A word is scored by the LM
when its boundary token is emitted, or at the end of the utterance.

Objective per transcript W::

    log P_ctc(W | lattice) + lm_weight * ln P_lm(W) + word_score * |W|

LM scores are converted from log10 to natural log. The boundary token separates
words; transcripts never start or end with it.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .ctc import InfeasibleTarget, TokenSet, ctc_loss
from .lm import BOS, EOS, Lexicon, NGramLm

LN10 = math.log(10.0)
NEG_INF = float("-inf")


class DecoderError(ValueError):
    pass


@dataclass
class DecoderConfig:
    beam_size: int = 1500
    lm_weight: float = 2.0
    word_score: float = 0.0
    tie_break: str = "prefix"   # lexicographic order of token prefixes

    def __post_init__(self):
        if self.beam_size < 1:
            raise DecoderError("beam_size must be >= 1")
        if not (math.isfinite(self.lm_weight) and math.isfinite(self.word_score)):
            raise DecoderError("lm_weight and word_score must be finite")
        if self.tie_break != "prefix":
            raise DecoderError(f"unknown tie_break {self.tie_break!r}")


class Trie:
    def __init__(self, lexicon: Lexicon, tokens: TokenSet):
        if len(lexicon) == 0:
            raise DecoderError("empty lexicon")
        lexicon.validate(tokens)
        self.children = [{}]
        self.words = [[]]
        for w, sp in lexicon.spellings.items():
            node = 0
            for sym in sp:
                tid = tokens.index(sym)
                nxt = self.children[node].get(tid)
                if nxt is None:
                    nxt = len(self.children)
                    self.children.append({})
                    self.words.append([])
                    self.children[node][tid] = nxt
                node = nxt
            self.words[node].append(w)
        for ws in self.words:
            ws.sort()


@dataclass
class Hypothesis:
    prefix: tuple
    node: int
    context: tuple              # LM context (last order-1 words, starting from <s>)
    words: tuple
    p_b: float = NEG_INF
    p_nb: float = NEG_INF
    lm_score: float = 0.0       # weighted LM + word-score contribution so far

    @property
    def acoustic(self) -> float:
        return _lse(self.p_b, self.p_nb)

    @property
    def score(self) -> float:
        return self.acoustic + self.lm_score


def _lse(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


class _Scorer:
    def __init__(self, lm: NGramLm | None, cfg: DecoderConfig):
        self.lm = lm
        self.cfg = cfg
        self.keep = (lm.order - 1) if lm is not None else 0
        self._cache = {}

    def word(self, w: str, ctx: tuple) -> float:
        return self.cfg.lm_weight * self._lm(w, ctx) + self.cfg.word_score

    def end(self, ctx: tuple) -> float:
        return self.cfg.lm_weight * self._lm(EOS, ctx)

    def _lm(self, w, ctx) -> float:
        if self.lm is None or self.cfg.lm_weight == 0.0:
            return 0.0
        key = (w, ctx)
        v = self._cache.get(key)
        if v is None:
            v = self.lm.score(w, ctx) * LN10
            self._cache[key] = v
        return v

    def push(self, ctx: tuple, w: str) -> tuple:
        if self.keep == 0:
            return ()
        return (ctx + (w,))[-self.keep:]

    def start(self) -> tuple:
        return (BOS,) if self.keep else ()


def beam_search(lattice: np.ndarray, lexicon: Lexicon, lm: NGramLm | None, cfg: DecoderConfig,
                tokens: TokenSet | None = None, trie: Trie | None = None) -> tuple[list[str], float]:
    """Return the best (word list, total score) under the shallow-fusion objective."""
    tokens = tokens or TokenSet()
    trie = trie or Trie(lexicon, tokens)
    lat = np.asarray(lattice, dtype=np.float64)
    blank, bnd = tokens.blank_id, tokens.boundary_id
    sc = _Scorer(lm, cfg)
    start_ctx = sc.start()
    beam = {((), 0, start_ctx): Hypothesis((), 0, start_ctx, (), p_b=0.0)}

    for t in range(lat.shape[0]):
        row = lat[t].tolist()
        nxt: dict = {}

        def get(key, parent, words, lm_score):
            h = nxt.get(key)
            if h is None:
                h = Hypothesis(key[0], key[1], key[2], words, lm_score=lm_score)
                nxt[key] = h
            return h

        for key, h in beam.items():
            total = h.acoustic
            # stay: blank
            s = get(key, h, h.words, h.lm_score)
            s.p_b = _lse(s.p_b, total + row[blank])
            last = h.prefix[-1] if h.prefix else None
            if last is not None:
                s.p_nb = _lse(s.p_nb, h.p_nb + row[last])
            # extend with a character
            for tok, child in trie.children[h.node].items():
                src = h.p_b if tok == last else total
                if src == NEG_INF:
                    continue
                nk = (h.prefix + (tok,), child, h.context)
                e = get(nk, h, h.words, h.lm_score)
                e.p_nb = _lse(e.p_nb, src + row[tok])
            # extend with a word boundary
            if h.node != 0 and trie.words[h.node]:
                for w in trie.words[h.node]:
                    nctx = sc.push(h.context, w)
                    nk = (h.prefix + (bnd,), 0, nctx)
                    e = get(nk, h, h.words + (w,), h.lm_score + sc.word(w, h.context))
                    e.p_nb = _lse(e.p_nb, total + row[bnd])
        if t == lat.shape[0] - 1:
            # only hypotheses that can end here compete for the last beam
            nxt = {k: h for k, h in nxt.items() if _can_end(h, trie, bnd)}
        beam = _prune(nxt, cfg.beam_size)

    best = None
    for h in beam.values():
        if h.prefix and h.prefix[-1] == bnd:
            continue
        if h.node == 0:
            cands = [(h.words, h.context, h.lm_score)]
        elif trie.words[h.node]:
            cands = [(h.words + (w,), sc.push(h.context, w), h.lm_score + sc.word(w, h.context))
                     for w in trie.words[h.node]]
        else:
            continue
        for words, ctx, lms in cands:
            total = h.acoustic + lms + sc.end(ctx)
            cand = (total, h.prefix, words)
            if best is None or _better(cand, best):
                best = cand
    if best is None:
        return [], NEG_INF
    return list(best[2]), best[0]


def _can_end(h: Hypothesis, trie: Trie, bnd: int) -> bool:
    if h.prefix and h.prefix[-1] == bnd:
        return False
    return h.node == 0 or bool(trie.words[h.node])


def _better(a, b) -> bool:
    if a[0] != b[0]:
        return a[0] > b[0]
    return (a[1], a[2]) < (b[1], b[2])


def _prune(hyps: dict, k: int) -> dict:
    if len(hyps) <= k:
        return hyps
    ranked = sorted(hyps.items(), key=lambda kv: (-kv[1].score, kv[0][0], kv[0][2]))
    return dict(ranked[:k])


# ---------------------------------------------------------------- oracle

def transcript_score(lattice, words, lexicon: Lexicon, lm: NGramLm | None, cfg: DecoderConfig,
                     tokens: TokenSet | None = None) -> float:
    """Exact objective value of one word sequence (CTC marginal + LM + word terms)."""
    tokens = tokens or TokenSet()
    ids = []
    for i, w in enumerate(words):
        if i:
            ids.append(tokens.boundary_id)
        ids.extend(tokens.index(s) for s in lexicon.spellings[w])
    try:
        nll, _ = ctc_loss(lattice, ids)
    except InfeasibleTarget:
        return NEG_INF
    sc = _Scorer(lm, cfg)
    ctx = sc.start()
    extra = 0.0
    for w in words:
        extra += sc.word(w, ctx)
        ctx = sc.push(ctx, w)
    return -nll + extra + sc.end(ctx)


def exhaustive_decode(lattice, lexicon: Lexicon, lm: NGramLm | None, cfg: DecoderConfig,
                      tokens: TokenSet | None = None) -> tuple[list[str], float]:
    """Score every lexicon word sequence that fits in the lattice and return the argmax."""
    tokens = tokens or TokenSet()
    lat = np.asarray(lattice, dtype=np.float64)
    T = lat.shape[0]
    if T > 6 or len(lexicon) > 3:
        raise DecoderError(f"instance too large for exhaustive search: T={T}, words={len(lexicon)}")
    best = None
    words_all = sorted(lexicon.spellings)
    for n in range(0, (T + 1) // 2 + 1):
        for seq in itertools.product(words_all, repeat=n):
            n_tok = sum(len(lexicon.spellings[w]) for w in seq) + max(n - 1, 0)
            if n_tok > T:
                continue
            s = transcript_score(lat, seq, lexicon, lm, cfg, tokens)
            if s == NEG_INF:
                continue
            prefix = _prefix_ids(seq, lexicon, tokens)
            cand = (s, prefix, tuple(seq))
            if best is None or _better(cand, best):
                best = cand
    if best is None:
        return [], NEG_INF
    return list(best[2]), best[0]


def _prefix_ids(words, lexicon, tokens) -> tuple:
    ids = []
    for i, w in enumerate(words):
        if i:
            ids.append(tokens.boundary_id)
        ids.extend(tokens.index(s) for s in lexicon.spellings[w])
    return tuple(ids)
