import csv
import json

import pytest

from avcpl.cli import main
from avcpl.config import ConfigError, parse_config

TINY_INI = """
[run]
seed = 0
output_dir = {out}
eval_every = 4
[corpus]
max_words = 3
size_labeled_small = 8
size_labeled_large = 0
size_unlabeled_in = 8
size_unlabeled_shift = 4
size_valid = 3
size_test = 4
[encoder]
model_dim = 8
n_layers = 1
n_heads = 2
ffn_dim = 16
[train]
steps = 8
max_frames = 60
warmup_steps = 2
hold_until = 4
decay_every = 4
[cpl]
warmup = 2
cache_size = 2
steps = 8
[lm]
n_sentences = 200
order = 3
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "run.ini"
    cfg.write_text(TINY_INI.format(out=out), encoding="utf-8")
    assert main(["datagen", "--config", str(cfg)]) == 0
    assert main(["train-seed", "--config", str(cfg)]) == 0
    return out, cfg


def _rows(out):
    with open(out / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_layout_and_seed_rows(run_dir):
    out, _ = run_dir
    for name in ("config.copy", "checkpoints/seed.avcp", "metrics.csv", "train-seed.json", "corpus/test.jsonl"):
        assert (out / name).exists(), name
    assert (out / "transcripts").is_dir()
    rows = [r for r in _rows(out) if r["run"] == "seed"]
    assert {r["mode"] for r in rows if r["split"] == "test"} == {"ASR", "VSR", "AVSR"}
    assert any(r["split"] == "valid" for r in rows)


def test_decode_round_trip_with_lm(run_dir):
    out, cfg = run_dir
    arpa = out / "lm.arpa"
    assert main(["lm-train", "--config", str(cfg), "--out", str(arpa)]) == 0
    assert arpa.read_text().startswith("\n\\data\\")
    assert main(["decode", "--config", str(cfg), "--mode", "AVSR", "--beam", "8", "--lm", str(arpa),
                 "--lm-weight", "1.0", "--word-score", "0.5", "--jobs", "2"]) == 0
    res = json.loads((out / "decode.json").read_text())
    assert res["decode"] == "beam" and "AVSR" in res["modes"]
    rows = [r for r in _rows(out) if r["decode"] == "beam"]
    assert rows and rows[-1]["mode"] == "AVSR"
    assert (out / "transcripts" / "test.AVSR.beam.tsv").exists()


def test_cpl_cache_p0_frozen_ages(run_dir):
    out, cfg = run_dir
    assert main(["cpl", "--config", str(cfg), "--algo", "slimipl", "--cache-p", "0"]) == 0
    rows = [r for r in _rows(out) if r["run"] == "cpl_slimipl" and r["pl_age_mean"]]
    ages = [float(r["pl_age_mean"]) for r in rows]
    assert len(ages) >= 2 and ages == sorted(ages) and ages[-1] > ages[0]
    assert all(r["pl_wer_vs_gold"] != "" for r in rows)


def test_cpl_cache_p1_zero_age(run_dir):
    out, cfg = run_dir
    assert main(["cpl", "--config", str(cfg), "--algo", "slimipl", "--cache-p", "1"]) == 0
    rows = [r for r in _rows(out) if r["run"] == "cpl_slimipl" and r["pl_age_mean"]]
    assert float(rows[-1]["pl_age_mean"]) == 0.0


def test_same_config_same_metrics_csv(tmp_path):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cfg = tmp_path / f"{name}.ini"
        cfg.write_text(TINY_INI.format(out=out), encoding="utf-8")
        for cmd in (["datagen"], ["train-seed"], ["cpl", "--algo", "ema"]):
            assert main(cmd + ["--config", str(cfg)]) == 0
        blobs.append((out / "metrics.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_pipeline_and_report(tmp_path):
    out = tmp_path / "p"
    ini = TINY_INI.format(out=out) + """
[stage.1]
mode = seed
[stage.2]
mode = cpl
unlabeled = unlabeled_shift
steps = 4
[stage.3]
mode = cpl
unlabeled = unlabeled_in
algorithm = slimipl
steps = 4
"""
    cfg = tmp_path / "p.ini"
    cfg.write_text(ini, encoding="utf-8")
    assert main(["datagen", "--config", str(cfg)]) == 0
    assert main(["pipeline", "--config", str(cfg)]) == 0
    res = json.loads((out / "pipeline.json").read_text())
    assert [s["stage"] for s in res["stages"]] == ["stage.1", "stage.2", "stage.3"]
    assert (out / "wer_final.png").exists()
    assert main(["report", "--config", str(cfg)]) == 0


def test_env_seed_override(tmp_path):
    cfg = parse_config(TINY_INI.format(out=tmp_path), env={"AVCPL_SEED": "7"})
    assert cfg.seed == 7 and cfg.corpus.seed == 7


def test_config_errors_enumerated(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nseed = x\nwhat = 1\n[cpl]\ncache_p = 3\n[mystery]\n", encoding="utf-8")
    assert main(["train-seed", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    for frag in ("seed", "'what'", "cache_p", "[mystery]"):
        assert frag in err
    with pytest.raises(ConfigError) as exc:
        parse_config("[run]\nseed = x\nwhat = 1\n")
    assert len(exc.value.problems) == 2


def test_missing_inputs_exit_nonzero(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY_INI.format(out=tmp_path / "o"), encoding="utf-8")
    assert main(["train-seed", "--config", str(cfg)]) == 1
    assert "datagen" in capsys.readouterr().err
    assert main(["cpl", "--config", str(cfg), "--init-checkpoint", str(tmp_path / "none.avcp")]) == 1
    assert main(["decode"]) == 1
