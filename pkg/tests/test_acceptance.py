"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before asserting.
The training criteria share one seed model and one corpus through module fixtures.
"""
import math
import time

import numpy as np
import pytest

from avcpl import tensor as tn
from avcpl.cli import main as cli_main
from avcpl.ctc import ctc_brute_force, ctc_loss
from avcpl.cpl import Stage, av_ema_pl, av_slimipl, ema_update, matched_cache, staged_pipeline, train_seed
from avcpl.data import CorpusConfig, lm_text, strip_transcripts, synth_corpus
from avcpl.decoder import DecoderConfig, beam_search, exhaustive_decode
from avcpl.encoder import ModalityDropoutConfig, init_params, sample_branches
from avcpl.evaluate import evaluate
from avcpl.lm import Lexicon, parse_arpa, arpa_text, train_ngram
from avcpl.profiles import desk
from conftest import record
from gradcases import CASES, check_case, encoder_grad_error
from instances import TINY_TOKENS, ctc_instance, decoder_instance

MODES = ("ASR", "VSR", "AVSR")


def _pct(x):
    return f"{100 * x:.1f}%"


# ---------------------------------------------------------------- shared fixtures

@pytest.fixture(scope="module")
def profile():
    return desk(seed=0)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(CorpusConfig())


@pytest.fixture(scope="module")
def seed_run(corpus, profile):
    t0 = time.perf_counter()
    res = train_seed(corpus["labeled_small"], profile.encoder, profile.seed_dropout, tcfg=profile.seed_train)
    wers = {m: evaluate(res.params, corpus["test"], m).wer for m in MODES}
    return res.params, wers, time.perf_counter() - t0


@pytest.fixture(scope="module")
def shifted_run(corpus, profile, seed_run):
    """Single-stage CPL on the domain-shifted unlabeled split (reused by staging)."""
    params, _, _ = seed_run
    U = strip_transcripts(corpus["unlabeled_shift"])
    t0 = time.perf_counter()
    res = av_ema_pl(corpus["labeled_small"], U, params, profile.cpl, profile.cpl_train)
    return res.params, time.perf_counter() - t0


# ---------------------------------------------------------------- 1-6: unit-level criteria

def test_c01_ctc_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_val = worst_grad = 0.0
    for _ in range(1000):
        lat, tgt = ctc_instance(rng)
        nll, g = ctc_loss(lat, tgt)
        worst_val = max(worst_val, abs(nll - ctc_brute_force(lat, tgt)))
        fd = tn.finite_diff_grad(lambda x: ctc_loss(x, tgt)[0], lat, eps=1e-6)
        worst_grad = max(worst_grad, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8)))
    dt = time.perf_counter() - t0
    ok = worst_val <= 1e-9 and worst_grad <= 1e-4 and dt < 60
    record(1, "CTC vs enumeration and finite differences", ok,
           f"max |dNLL|={worst_val:.2e} (<=1e-9), max grad rel err={worst_grad:.2e} (<=1e-4), {dt:.1f}s (<60s)")
    assert ok


def test_c02_autodiff():
    t0 = time.perf_counter()
    worst = {name: max(check_case(name, s) for s in range(100)) for name in CASES}
    worst["encoder_forward"] = max(encoder_grad_error(s, n_probe=3) for s in range(100))
    dt = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= 1e-3 and dt < 120
    record(2, "finite-difference checks of every op", ok,
           f"{len(worst)} ops x 100 seeds, worst rel err {err:.2e} ({name}) (<=1e-3), {dt:.1f}s (<120s)")
    assert ok


def test_c03_decoder_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = non_monotone = 0
    beams = (1, 2, 4, 8, 32, 10 ** 6)
    for i in range(200):
        lat, lex, lm = decoder_instance(rng, with_lm=i % 2 == 1)
        cfg = DecoderConfig(beam_size=10 ** 6, lm_weight=0.0)
        w, s = beam_search(lat, lex, None, cfg, TINY_TOKENS)
        we, se = exhaustive_decode(lat, lex, None, cfg, TINY_TOKENS)
        mismatches += (w != we) or not math.isclose(s, se, abs_tol=1e-9)
        scores = [beam_search(lat, lex, lm, DecoderConfig(beam_size=k, lm_weight=1.0), TINY_TOKENS)[1]
                  for k in beams]
        non_monotone += any(b < a - 1e-12 for a, b in zip(scores, scores[1:]))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and non_monotone == 0 and dt < 60
    record(3, "beam search vs exhaustive decoding", ok,
           f"200 instances: {mismatches} mismatches, {non_monotone} non-monotone in beam size, {dt:.1f}s (<60s)")
    assert ok


def test_c04_language_model():
    from test_lm import FIXTURE, HAND, _normalization_errors, random_contexts
    t0 = time.perf_counter()
    lm = train_ngram(lm_text(CorpusConfig(), 2000), order=4)
    norm = max(_normalization_errors(lm, random_contexts(lm, np.random.default_rng(11), 100)))
    text = arpa_text(lm)
    same = arpa_text(parse_arpa(text)) == text
    hand = max(abs(10 ** train_ngram(FIXTURE, order=max(o, 2)).score(w, c) - p) for (o, w, c), p in HAND.items())
    dt = time.perf_counter() - t0
    ok = norm <= 1e-4 and same and hand <= 1e-12 and dt < 10
    record(4, "Kneser-Ney normalization, ARPA round trip, hand fixture", ok,
           f"max |sum P - 1|={norm:.1e} (<=1e-4), ARPA byte-identical={same}, "
           f"hand fixture max err={hand:.1e}, {dt:.1f}s (<10s)")
    assert ok


def test_c05_modality_dropout_statistics():
    n = 10 ** 4
    worst_z = 0.0
    rng = np.random.default_rng(5)
    for p in (0.05, 0.1, 0.25, 0.5):
        cfg = ModalityDropoutConfig(p, p)
        b = sample_branches(n, cfg, rng)
        for code, q in enumerate(cfg.branch_probs()):
            z = abs((b == code).mean() - q) / math.sqrt(q * (1 - q) / n)
            worst_z = max(worst_z, z)
    ok = worst_z <= 3.0
    record(5, "fusion-branch frequencies", ok, f"grid p in {{0.05,0.1,0.25,0.5}}, 1e4 draws, worst |z|={worst_z:.2f} (<=3)")
    assert ok


def test_c06_mechanisms():
    c = synth_corpus(CorpusConfig(sizes={"labeled_small": 8, "labeled_large": 0, "unlabeled_in": 10,
                                         "unlabeled_shift": 0, "valid": 0, "test": 0}, max_words=3))
    from test_cpl import TINY_ENC, TINY_TRAIN, _cfg
    L, U = c["labeled_small"], strip_transcripts(c["unlabeled_in"])
    seed = train_seed(L, TINY_ENC, tcfg=TINY_TRAIN).params
    r0 = av_slimipl(L, U, seed, _cfg(cache_p=0.0, steps=16), TINY_TRAIN)
    ages0 = [r.pl_age for r in r0.history if r.kind == "U"]
    fill_end = min(r.step for r in r0.history if r.kind == "U")
    frozen = (not r0.cache.lifetimes and ages0 == sorted(ages0) and ages0[-1] > ages0[0]
              and all(e.step < fill_end for e in r0.cache.entries))
    r1 = av_slimipl(L, U, seed, _cfg(cache_p=1.0, steps=16), TINY_TRAIN)
    age1 = float(np.mean([r.pl_age for r in r1.history if r.kind == "U"]))
    theta = init_params(TINY_ENC, seed=1, dtype=np.float64)
    phi = init_params(TINY_ENC, seed=2, dtype=np.float64)
    alpha = 0.95

    def dist():
        return math.sqrt(sum(float(((phi[k].data - theta[k].data) ** 2).sum()) for k in phi))
    d0, dev = dist(), 0.0
    for k in range(1, 51):
        ema_update(phi, theta, alpha)
        dev = max(dev, abs(dist() - d0 * alpha ** k))
    ok = frozen and age1 == 0.0 and dev <= 1e-6
    record(6, "cache and EMA mechanisms", ok,
           f"p=0 PLs frozen={frozen}, p=1 mean PL age={age1:.1f} (=0), EMA contraction max dev={dev:.1e} (<=1e-6)")
    assert ok


# ---------------------------------------------------------------- 7-10: end-to-end

@pytest.mark.slow
def test_c07_seed_asymmetry(seed_run):
    _, w, dt = seed_run
    ok = w["ASR"] < 0.15 and w["VSR"] > 0.40 and w["AVSR"] <= w["ASR"] + 0.02 and dt <= 600
    record(7, "seed model audio/video asymmetry", ok,
           f"ASR {_pct(w['ASR'])} (<15%), VSR {_pct(w['VSR'])} (>40%), AVSR {_pct(w['AVSR'])} "
           f"(<= ASR+2), {dt:.0f}s (<=600s)")
    assert ok


@pytest.mark.slow
def test_c08_av_cpl_gain(corpus, profile, seed_run):
    params, sw, _ = seed_run
    L, U = corpus["labeled_small"], strip_transcripts(corpus["unlabeled_in"])
    t0 = time.perf_counter()
    ema = av_ema_pl(L, U, params, profile.cpl, profile.cpl_train)
    ew = {m: evaluate(ema.params, corpus["test"], m).wer for m in ("ASR", "VSR")}
    cfg = profile.cpl
    slim_cfg = type(cfg)(**{**cfg.__dict__, "algorithm": "slimipl",
                            "cache_size": matched_cache(cfg.alpha, cfg.cache_p)})
    slim = av_slimipl(L, U, params, slim_cfg, profile.cpl_train)
    slim_v = evaluate(slim.params, corpus["test"], "VSR").wer
    dt = time.perf_counter() - t0
    rel = (sw["VSR"] - ew["VSR"]) / sw["VSR"]
    ok = rel >= 0.15 and ew["ASR"] - sw["ASR"] <= 0.05 and abs(slim_v - ew["VSR"]) <= 0.05 and dt <= 1200
    record(8, "AV-CPL improves lip reading", ok,
           f"EMA VSR {_pct(sw['VSR'])}->{_pct(ew['VSR'])} ({100 * rel:.0f}% rel, >=15%), "
           f"ASR {_pct(sw['ASR'])}->{_pct(ew['ASR'])} (<=+5), SlimIPL C={slim_cfg.cache_size} "
           f"VSR {_pct(slim_v)} (within 5 of EMA), {dt:.0f}s (<=1200s)")
    assert ok


@pytest.mark.slow
def test_c09_staging(corpus, profile, shifted_run, tmp_path):
    p_shift, dt_shift = shifted_run
    L, Ui = corpus["labeled_small"], strip_transcripts(corpus["unlabeled_in"])
    t0 = time.perf_counter()
    p_two, _ = staged_pipeline([Stage("cpl", L, Ui, profile.cpl, profile.cpl_train, name="in-domain")],
                               init=p_shift, workdir=tmp_path)
    dt = dt_shift + time.perf_counter() - t0
    one = evaluate(p_shift, corpus["test"], "VSR").wer
    two = evaluate(p_two, corpus["test"], "VSR").wer
    ok = one - two >= 0.03 and dt <= 1500
    record(9, "two-stage shifted-then-in-domain CPL", ok,
           f"VSR single-stage shifted {_pct(one)} vs two-stage {_pct(two)} (>=3 points better), {dt:.0f}s (<=1500s)")
    assert ok


@pytest.mark.slow
def test_c10_lm_decoding(corpus, profile, seed_run):
    params, greedy, _ = seed_run
    cc = CorpusConfig()
    lm = train_ngram(lm_text(cc, 20000), order=4)
    lex = Lexicon.from_words(cc.vocab)
    beam = {m: evaluate(params, corpus["test"], m, "beam", lex, lm, profile.decoder).wer for m in MODES}
    ok = all(beam[m] <= greedy[m] for m in MODES)
    record(10, "beam + 4-gram vs greedy", ok,
           ", ".join(f"{m} {_pct(greedy[m])}->{_pct(beam[m])}" for m in MODES) + " (beam <= greedy)")
    assert ok


# ---------------------------------------------------------------- 11: reproducibility

REPRO_INI = """
[run]
seed = 3
output_dir = {out}
eval_every = 20
[corpus]
size_labeled_small = 24
size_labeled_large = 0
size_unlabeled_in = 24
size_unlabeled_shift = 0
size_valid = 8
size_test = 8
[encoder]
model_dim = 16
n_layers = 1
n_heads = 2
ffn_dim = 32
[train]
steps = 40
max_frames = 160
warmup_steps = 10
hold_until = 20
decay_every = 20
[cpl]
warmup = 5
cache_size = 3
steps = 40
[lm]
n_sentences = 500
order = 4
"""


def test_c11_reproducibility(tmp_path):
    blobs = []
    for name in ("first", "second"):
        out = tmp_path / name
        cfg = tmp_path / f"{name}.ini"
        cfg.write_text(REPRO_INI.format(out=out), encoding="utf-8")
        arpa = out / "lm.arpa"
        commands = [["datagen"], ["train-seed", "--pretrain", "audio"], ["cpl", "--algo", "slimipl"],
                    ["cpl", "--algo", "ema"], ["lm-train", "--out", str(arpa)],
                    ["decode", "--beam", "16", "--lm", str(arpa), "--jobs", "2"]]
        for cmd in commands:
            assert cli_main(cmd + ["--config", str(cfg)]) == 0
        blobs.append(((out / "metrics.csv").read_bytes(), arpa.read_bytes()))
    ok = blobs[0] == blobs[1] and len(blobs[0][0]) > 0
    n_rows = blobs[0][0].count(b"\n") - 1
    record(11, "re-run with identical config and seed", ok,
           f"metrics.csv identical={blobs[0][0] == blobs[1][0]} ({n_rows} rows), ARPA identical={blobs[0][1] == blobs[1][1]}")
    assert ok
