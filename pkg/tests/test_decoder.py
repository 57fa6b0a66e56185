import math

import numpy as np
import pytest

from avcpl.decoder import (DecoderConfig, DecoderError, Trie, beam_search, exhaustive_decode,
                           transcript_score)
from avcpl.lm import Lexicon, LexiconError, train_ngram
from instances import TINY_TOKENS, decoder_instance

SATURATING = 10 ** 6
BEAMS = (1, 2, 4, 8, 32, SATURATING)


def test_saturating_beam_equals_exhaustive_without_lm():
    rng = np.random.default_rng(0)
    cfg = DecoderConfig(beam_size=SATURATING, lm_weight=0.0)
    for _ in range(100):
        lat, lex, _ = decoder_instance(rng)
        w, s = beam_search(lat, lex, None, cfg, TINY_TOKENS)
        we, se = exhaustive_decode(lat, lex, None, cfg, TINY_TOKENS)
        assert w == we
        assert s == pytest.approx(se, abs=1e-9)


def test_saturating_beam_equals_exhaustive_with_lm_and_word_score():
    rng = np.random.default_rng(1)
    for i in range(60):
        lat, lex, lm = decoder_instance(rng, with_lm=True)
        cfg = DecoderConfig(beam_size=SATURATING, lm_weight=[0.5, 2.0][i % 2], word_score=[-0.5, 0.7][i % 2])
        w, s = beam_search(lat, lex, lm, cfg, TINY_TOKENS)
        we, se = exhaustive_decode(lat, lex, lm, cfg, TINY_TOKENS)
        assert w == we
        assert s == pytest.approx(se, abs=1e-9)


def test_best_score_monotone_in_beam():
    rng = np.random.default_rng(2)
    for i in range(60):
        lat, lex, lm = decoder_instance(rng, with_lm=i % 2 == 0)
        scores = [beam_search(lat, lex, lm, DecoderConfig(beam_size=k, lm_weight=1.0), TINY_TOKENS)[1]
                  for k in BEAMS]
        assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))


def test_score_matches_transcript_score():
    rng = np.random.default_rng(3)
    lat, lex, lm = decoder_instance(rng, with_lm=True)
    cfg = DecoderConfig(beam_size=SATURATING, lm_weight=1.5, word_score=0.3)
    w, s = beam_search(lat, lex, lm, cfg, TINY_TOKENS)
    assert s == pytest.approx(transcript_score(lat, w, lex, lm, cfg, TINY_TOKENS))


def test_lm_breaks_acoustic_tie():
    # frames spell "ab" but the acoustics cannot tell a from b
    lex = Lexicon({"ab": ["a", "b"], "ba": ["b", "a"]})
    lat = np.full((2, len(TINY_TOKENS)), -30.0)
    lat[:, 3] = lat[:, 4] = math.log(0.5)
    lm = train_ngram(["ba", "ba", "ab"], order=2)
    w0, _ = beam_search(lat, lex, None, DecoderConfig(beam_size=16, lm_weight=0.0), TINY_TOKENS)
    w1, _ = beam_search(lat, lex, lm, DecoderConfig(beam_size=16, lm_weight=1.0), TINY_TOKENS)
    assert w0 == ["ab"]          # tie resolved by token prefix order
    assert w1 == ["ba"]


def test_leading_and_trailing_boundary_never_returned():
    lex = Lexicon({"a": ["a"]})
    lat = np.full((3, len(TINY_TOKENS)), -20.0)
    lat[0, 1] = lat[1, 3] = lat[2, 1] = 0.0       # | a |
    w, s = beam_search(lat, lex, None, DecoderConfig(beam_size=64, lm_weight=0.0), TINY_TOKENS)
    assert w == ["a"]
    assert math.isfinite(s)


def test_config_and_lexicon_validation():
    with pytest.raises(DecoderError):
        DecoderConfig(beam_size=0)
    with pytest.raises(DecoderError):
        DecoderConfig(lm_weight=float("nan"))
    with pytest.raises(DecoderError):
        Trie(Lexicon({}), TINY_TOKENS)
    with pytest.raises(LexiconError):
        Trie(Lexicon({"z": ["z"]}), TINY_TOKENS)


def test_exhaustive_refuses_large_instances():
    with pytest.raises(DecoderError):
        exhaustive_decode(np.zeros((7, 5)), Lexicon({"a": ["a"]}), None, DecoderConfig(), TINY_TOKENS)
