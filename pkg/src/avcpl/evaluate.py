"""Corpus WER of a model on a split, per recognition mode, greedy or beam decoding."""
from __future__ import annotations

from dataclasses import dataclass

from .ctc import TokenSet, ctc_greedy_decode
from .data import batch_by_length
from .decoder import DecoderConfig, Trie, beam_search
from .encoder import branches_for_mode, forward, pad_batch
from .metrics import WerReport, wer

MODES = {"ASR": "force_a", "VSR": "force_v", "AVSR": "force_av"}


class EvalError(ValueError):
    pass


@dataclass
class Hypotheses:
    ids: list
    refs: list
    hyps: list


def lattices(params, utts, mode: str, max_frames: int = 2000):
    """Yield (utterance, (T, |V|) log-prob lattice) in input order."""
    if mode not in MODES:
        raise EvalError(f"mode must be one of {sorted(MODES)}, got {mode!r}")
    out = {}
    for batch in batch_by_length(utts, max(max_frames, max(u.frames_v for u in utts))):
        a, _ = pad_batch([u.audio for u in batch])
        v, lv = pad_batch([u.video for u in batch])
        lp, ol = forward(params, a, v, lv, branches_for_mode(MODES[mode], len(batch), None, None))
        for i, u in enumerate(batch):
            out[u.id] = lp.data[i, : ol[i]].astype("float64")
    return [(u, out[u.id]) for u in utts]


def transcribe(params, utts, mode: str = "AVSR", decode: str = "greedy", lexicon=None, lm=None,
               dcfg: DecoderConfig | None = None, tokens: TokenSet | None = None) -> list[str]:
    tokens = tokens or TokenSet()
    if decode not in ("greedy", "beam"):
        raise EvalError(f"decode must be 'greedy' or 'beam', got {decode!r}")
    if decode == "beam" and lexicon is None:
        raise EvalError("beam decoding needs a lexicon")
    if not utts:
        return []
    trie = Trie(lexicon, tokens) if decode == "beam" else None
    dcfg = dcfg or DecoderConfig(beam_size=64)
    hyps = []
    for _, lat in lattices(params, utts, mode):
        if decode == "greedy":
            hyps.append(tokens.decode_ids(ctc_greedy_decode(lat)))
        else:
            words, _ = beam_search(lat, lexicon, lm, dcfg, tokens, trie)
            hyps.append(" ".join(words))
    return hyps


def evaluate(params, utts, mode: str = "AVSR", decode: str = "greedy", lexicon=None, lm=None,
             dcfg: DecoderConfig | None = None, tokens: TokenSet | None = None,
             return_hyps: bool = False):
    """Corpus-level WER (errors summed over utterances / total reference words)."""
    missing = [u.id for u in utts if u.text is None]
    if missing:
        raise EvalError(f"evaluation needs transcripts; missing for {', '.join(missing[:5])}")
    hyps = transcribe(params, utts, mode, decode, lexicon, lm, dcfg, tokens)
    rep = WerReport()
    for u, h in zip(utts, hyps):
        rep += wer(u.text.split(), h.split())
    rep.by_mode[mode] = rep.wer
    if return_hyps:
        return rep, Hypotheses([u.id for u in utts], [u.text for u in utts], hyps)
    return rep
