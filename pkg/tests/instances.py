"""Random small problem instances shared by unit and acceptance tests."""
import numpy as np

from avcpl.ctc import TokenSet
from avcpl.lm import Lexicon, train_ngram

TINY_TOKENS = TokenSet(chars="ab")      # blank, |, ', a, b
TINY_WORDS = ["a", "b", "ab", "ba", "aa", "bab"]


def log_softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def ctc_instance(rng):
    """(lattice (T, V), target) with T <= 8, V <= 5 and a feasible target."""
    T = int(rng.integers(1, 9))
    V = int(rng.integers(2, 6))
    lat = log_softmax(rng.normal(size=(T, V)) * 2.0)
    while True:
        U = int(rng.integers(0, T + 1))
        tgt = [int(t) for t in rng.integers(1, V, size=U)]
        reps = sum(a == b for a, b in zip(tgt, tgt[1:]))
        if U + reps <= T:
            return lat, tgt


def decoder_instance(rng, with_lm=False):
    """(lattice, lexicon, lm) with T <= 6 and at most 3 lexicon words over {a, b}."""
    n = int(rng.integers(1, 4))
    words = sorted(rng.choice(TINY_WORDS, size=n, replace=False).tolist())
    lex = Lexicon({w: list(w) for w in words})
    T = int(rng.integers(1, 7))
    lat = log_softmax(rng.normal(size=(T, len(TINY_TOKENS))) * 1.5)
    lm = None
    if with_lm:
        sents = [" ".join(rng.choice(words, size=int(rng.integers(1, 4))).tolist()) for _ in range(6)]
        lm = train_ngram(sents, order=2)
    return lat, lex, lm
