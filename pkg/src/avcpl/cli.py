"""Command line: corpus generation, seed training, CPL, LM training, decoding, pipelines.

Every command reads a run config (INI) and writes into its output directory::

    config.copy  checkpoints/  metrics.csv  transcripts/  <command>.json
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .checkpoint import CheckpointError
from .cpl import (CplError, Monitor, Stage, TrainState, run_cpl, staged_pipeline, train_seed)
from .ctc import TokenSet, ctc_greedy_decode
from .data import BatchError, CorpusError, lm_text, read_manifest, synth_corpus, write_corpus
from .decoder import DecoderConfig, DecoderError, Trie, beam_search
from .encoder import EncoderError
from .evaluate import MODES, EvalError, evaluate, lattices
from .lm import ArpaError, Lexicon, LexiconError, read_arpa, read_lexicon, train_ngram, write_arpa, write_lexicon
from .metrics import WerReport, wer

log = logging.getLogger("avcpl")

METRIC_COLUMNS = ["step", "split", "mode", "decode", "wer", "sub", "ins", "del", "n_ref_words",
                  "pl_age_mean", "pl_wer_vs_gold", "run"]
PRETRAIN = {"none": "none", "audio": "audio_only", "video": "video_only"}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------- output helpers

def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return "" if v is None else str(v)


def append_metrics(outdir: Path, rows, run: str) -> Path:
    path = outdir / "metrics.csv"
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            r = {"run": run, **r}
            w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return path


def write_result(outdir: Path, command: str, payload: dict) -> Path:
    path = outdir / f"{command}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _prepare_outdir(cfg) -> Path:
    out = cfg.output_dir
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "transcripts").mkdir(exist_ok=True)
    (out / "config.copy").write_text(cfg.source_text, encoding="utf-8")
    return out


def _split(cfg, name: str, with_text: bool = True):
    utts = []
    for part in name.split("+"):
        path = cfg.corpus_dir / f"{part}.jsonl"
        if not path.exists():
            raise CliError(f"manifest not found: {path} (run 'datagen' first)")
        utts += read_manifest(path, with_text=with_text)
    return utts


def _gold(cfg, name: str) -> dict:
    gold = {}
    for part in name.split("+"):
        with open(cfg.corpus_dir / f"{part}.jsonl", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    if "text" in rec:
                        gold[rec["id"]] = rec["text"]
    return gold


def _final_rows(params, utts, split: str, step: int, modes=("ASR", "VSR", "AVSR")):
    rows = []
    for mode in modes:
        rep = evaluate(params, utts, mode, "greedy")
        rows.append({"step": step, "split": split, "mode": mode, "decode": "greedy", **rep.as_row()})
    return rows


def _monitor(cfg, gold=None) -> Monitor:
    valid = _split(cfg, cfg.run.valid) if cfg.run.eval_every else None
    return Monitor(valid, cfg.run.eval_every, gold=gold, split_name=cfg.run.valid)


# ---------------------------------------------------------------- commands

def cmd_datagen(cfg, args) -> dict:
    out = _prepare_outdir(cfg)
    corpus = synth_corpus(cfg.corpus)
    paths = write_corpus(corpus, cfg.corpus_dir)
    text = lm_text(cfg.corpus, cfg.lm.n_sentences)
    (cfg.corpus_dir / "lm_text.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    write_lexicon(Lexicon.from_words(cfg.corpus.vocab), cfg.corpus_dir / "lexicon.txt")
    counts = {k: len(v) for k, v in corpus.items()}
    append_metrics(out, [], "datagen")
    return {"corpus_dir": str(cfg.corpus_dir), "manifests": {k: str(v) for k, v in paths.items()},
            "utterances": counts, "lm_text": str(cfg.corpus_dir / "lm_text.txt"),
            "lexicon": str(cfg.corpus_dir / "lexicon.txt")}


def cmd_train_seed(cfg, args) -> dict:
    out = _prepare_outdir(cfg)
    pretrain = args.pretrain or cfg.run.pretrain
    L = _split(cfg, args.labeled or cfg.run.labeled)
    mon = _monitor(cfg)
    res = train_seed(L, cfg.encoder, cfg.dropout, PRETRAIN[pretrain], cfg.train, monitor=mon)
    path = out / "checkpoints" / "seed.avcp"
    res.state.save(path, meta={"command": "train-seed", "pretrain": pretrain})
    test = _split(cfg, cfg.run.test)
    rows = mon.rows + _final_rows(res.params, test, cfg.run.test, res.state.step)
    append_metrics(out, rows, "seed")
    return {"checkpoint": str(path), "steps": res.state.step, "pretrain": pretrain,
            "test": {r["mode"]: r["wer"] for r in rows[-3:]}}


def cmd_cpl(cfg, args) -> dict:
    out = _prepare_outdir(cfg)
    ccfg = cfg.cpl
    overrides = {}
    if args.algo:
        overrides["algorithm"] = args.algo
    if args.cache_p is not None:
        overrides["cache_p"] = args.cache_p
    if overrides:
        ccfg = cfgmod.CplConfig(**{**ccfg.__dict__, **overrides})
    init = Path(args.init_checkpoint) if args.init_checkpoint else out / "checkpoints" / "seed.avcp"
    seed = TrainState.load(init).params
    lab = args.labeled or cfg.run.labeled
    unl = args.unlabeled or cfg.run.unlabeled
    L = _split(cfg, lab)
    U = _split(cfg, unl, with_text=False)
    mon = _monitor(cfg, gold=_gold(cfg, unl))
    res = run_cpl(L, U, seed, ccfg, cfg.train, monitor=mon)
    mon.evaluate_now(res.state, "final") if mon.valid is not None else None
    path = out / "checkpoints" / f"cpl_{ccfg.algorithm}.avcp"
    res.state.save(path, meta={"command": "cpl", "algorithm": ccfg.algorithm, "init": str(init)})
    test = _split(cfg, cfg.run.test)
    final = _final_rows(res.params, test, cfg.run.test, res.state.step)
    append_metrics(out, mon.rows + final, f"cpl_{ccfg.algorithm}")
    return {"checkpoint": str(path), "algorithm": ccfg.algorithm, "steps": res.state.step,
            "empty_pls": res.empty_pls, "horizon": ccfg.horizon(),
            "test": {r["mode"]: r["wer"] for r in final},
            "loss_per_cycle_last": res.cycles[-1] if res.cycles else None}


def cmd_lm_train(cfg, args) -> dict:
    corpus_path = Path(args.corpus) if args.corpus else (cfg.corpus_dir / "lm_text.txt" if cfg else None)
    if corpus_path is None or not corpus_path.exists():
        raise CliError(f"LM corpus not found: {corpus_path}")
    sents = [ln.split() for ln in corpus_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    order = args.order or (cfg.lm.order if cfg else 4)
    discount = cfg.lm.discount if cfg else 0.75
    lm = train_ngram(sents, order=order, discount=discount)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_arpa(lm, out)
    result = {"arpa": str(out), "order": order, "ngram_counts": lm.counts(), "sentences": len(sents)}
    if cfg is not None:
        outdir = _prepare_outdir(cfg)
        append_metrics(outdir, [], "lm-train")
    return result


def _decode_one(item, decode, lexicon, lm, dcfg, tokens, trie):
    u, lat = item
    if decode == "greedy":
        return tokens.decode_ids(ctc_greedy_decode(lat))
    words, _ = beam_search(lat, lexicon, lm, dcfg, tokens, trie)
    return " ".join(words)


def cmd_decode(cfg, args) -> dict:
    out = _prepare_outdir(cfg)
    tokens = TokenSet()
    ck = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "seed.avcp"
    params = TrainState.load(ck).params
    split = args.split or cfg.run.test
    utts = _split(cfg, split)
    decode = "beam" if args.beam and args.beam > 0 else "greedy"
    lexicon = lm = trie = None
    dcfg = None
    if decode == "beam":
        lex_path = Path(args.lexicon) if args.lexicon else cfg.corpus_dir / "lexicon.txt"
        lexicon = read_lexicon(lex_path)
        if args.lm:
            lm = read_arpa(args.lm)
        lm_weight = args.lm_weight if args.lm_weight is not None else cfg.decoder.lm_weight
        word_score = args.word_score if args.word_score is not None else cfg.decoder.word_score
        dcfg = DecoderConfig(beam_size=args.beam, lm_weight=lm_weight if lm else 0.0, word_score=word_score)
        trie = Trie(lexicon, tokens)
    modes = list(MODES) if args.mode == "all" else [args.mode]
    rows, summary = [], {}
    for mode in modes:
        items = lattices(params, utts, mode)
        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            hyps = list(pool.map(lambda it: _decode_one(it, decode, lexicon, lm, dcfg, tokens, trie), items))
        rep = WerReport()
        tpath = out / "transcripts" / f"{split}.{mode}.{decode}.tsv"
        with open(tpath, "w", encoding="utf-8") as fh:
            fh.write("id\tref\thyp\n")
            for u, h in zip(utts, hyps):
                rep += wer(u.text.split(), h.split())
                fh.write(f"{u.id}\t{u.text}\t{h}\n")
        rows.append({"step": "", "split": split, "mode": mode, "decode": decode, **rep.as_row()})
        summary[mode] = {"wer": rep.wer, "transcripts": str(tpath), **rep.as_row()}
    append_metrics(out, rows, f"decode:{ck.stem}")
    return {"checkpoint": str(ck), "split": split, "decode": decode,
            "decoder": dcfg.__dict__ if dcfg else None, "lm": args.lm, "modes": summary}


def _stages(cfg):
    stages = []
    for st in cfg.stages:
        ccfg = cfg.cpl
        if st.algorithm:
            ccfg = cfgmod.CplConfig(**{**ccfg.__dict__, "algorithm": st.algorithm})
        tcfg = cfg.train
        if st.steps >= 0:
            tcfg = cfgmod.TrainConfig(**{**tcfg.__dict__, "steps": st.steps})
            if st.mode == "cpl":
                ccfg = cfgmod.CplConfig(**{**ccfg.__dict__, "steps": st.steps})
        stages.append(Stage(st.mode, _split(cfg, st.labeled),
                            _split(cfg, st.unlabeled, with_text=False) if st.unlabeled else None,
                            ccfg, tcfg, cfg.dropout, st.name))
    return stages


def cmd_pipeline(cfg, args) -> dict:
    if not cfg.stages:
        raise CliError("pipeline: config has no [stage.N] sections")
    out = _prepare_outdir(cfg)
    if not (cfg.corpus_dir / f"{cfg.run.test}.jsonl").exists():
        raise CliError(f"corpus not found in {cfg.corpus_dir} (run 'datagen' first)")
    init = TrainState.load(args.init_checkpoint).params if args.init_checkpoint else None
    stages = _stages(cfg)
    monitors = []

    def factory(i, st):
        unl = cfg.stages[i].unlabeled
        m = _monitor(cfg, gold=_gold(cfg, unl) if unl else None)
        monitors.append(m)
        return m

    params, results = staged_pipeline(stages, cfg.encoder, out / "checkpoints", init=init,
                                      monitor_factory=factory)
    test = _split(cfg, cfg.run.test)
    per_stage = []
    for i, (st, res, mon) in enumerate(zip(stages, results, monitors)):
        final = _final_rows(res.params, test, cfg.run.test, res.state.step)
        append_metrics(out, mon.rows + final, st.name)
        per_stage.append({"stage": st.name, "mode": st.mode, "steps": res.state.step,
                          "checkpoint": str(out / "checkpoints" / f"stage{i:02d}.avcp"),
                          "test": {r["mode"]: r["wer"] for r in final}})
    from .plotting import render_report
    figures = render_report(out / "metrics.csv")
    return {"stages": per_stage, "final_checkpoint": per_stage[-1]["checkpoint"],
            "figures": [str(f) for f in figures]}


def cmd_report(cfg, args) -> dict:
    from .plotting import render_report
    metrics = Path(args.metrics) if args.metrics else cfg.output_dir / "metrics.csv"
    if not metrics.exists():
        raise CliError(f"metrics file not found: {metrics}")
    figures = render_report(metrics, args.out)
    return {"metrics": str(metrics), "figures": [str(f) for f in figures]}


# ---------------------------------------------------------------- entry point

COMMANDS = {
    "datagen": cmd_datagen, "train-seed": cmd_train_seed, "cpl": cmd_cpl, "lm-train": cmd_lm_train,
    "decode": cmd_decode, "pipeline": cmd_pipeline, "report": cmd_report,
}
NEEDS_CONFIG = {"datagen", "train-seed", "cpl", "decode", "pipeline"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avcpl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run config (INI)")
        return sp

    add("datagen", "generate the synthetic corpus, LM text and lexicon")
    sp = add("train-seed", "supervised seed model")
    sp.add_argument("--pretrain", choices=sorted(PRETRAIN))
    sp.add_argument("--labeled")
    sp = add("cpl", "continuous pseudo-labeling from a seed checkpoint")
    sp.add_argument("--algo", choices=["slimipl", "ema"])
    sp.add_argument("--labeled")
    sp.add_argument("--unlabeled")
    sp.add_argument("--init-checkpoint")
    sp.add_argument("--cache-p", type=float)
    sp = add("lm-train", "train a word n-gram LM and write ARPA")
    sp.add_argument("--corpus")
    sp.add_argument("--order", type=int)
    sp.add_argument("--out", required=True)
    sp = add("decode", "decode a split and report WER")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split")
    sp.add_argument("--mode", choices=sorted(MODES) + ["all"], default="all")
    sp.add_argument("--beam", type=int, default=0, help="beam size; 0 = greedy")
    sp.add_argument("--lm")
    sp.add_argument("--lexicon")
    sp.add_argument("--lm-weight", type=float)
    sp.add_argument("--word-score", type=float)
    sp.add_argument("--jobs", type=int, default=1)
    sp = add("pipeline", "run the [stage.N] sections in order")
    sp.add_argument("--init-checkpoint")
    sp = add("report", "render figures from metrics.csv")
    sp.add_argument("--metrics")
    sp.add_argument("--out")
    return p


EXPECTED_ERRORS = (cfgmod.ConfigError, CliError, CplError, CorpusError, BatchError, CheckpointError,
                   ArpaError, LexiconError, DecoderError, EncoderError, EvalError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.config:
            cfg = cfgmod.load_config(args.config)
        elif args.command in NEEDS_CONFIG or (args.command == "report" and not args.metrics):
            raise CliError(f"{args.command}: --config is required")
        result = COMMANDS[args.command](cfg, args)
        if cfg is not None:
            write_result(cfg.output_dir, args.command, result)
        json.dump(result, sys.stdout, indent=2, sort_keys=True, default=str)
        sys.stdout.write("\n")
        return 0
    except cfgmod.ConfigError as exc:
        print(f"avcpl: {exc}", file=sys.stderr)
        return 2
    except EXPECTED_ERRORS as exc:
        print(f"avcpl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
