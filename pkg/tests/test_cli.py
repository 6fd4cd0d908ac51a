"""End-to-end checks of the chainrec command line."""

import json

import pytest

from chainrec import cli
from chainrec.corpus import extract_chains_2hop, load_corpus, load_gold
from chainrec.metrics import evaluate_predictions
from chainrec.synth import SynthConfig, generate_synthetic


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture()
def tiny_data(tmp_path):
    cfg = write_json(tmp_path / "synth.json",
                     {"questions": 12, "pool_size": 6, "vocab_size": 90,
                      "distractor_rate": 0.5})
    out = tmp_path / "data"
    assert run("gen-synth", "--config", cfg, "--out", out, "--seed", 9) == 0
    return out


def test_gen_synth_writes_corpus_gold_and_config_echo(tiny_data):
    corpus = load_corpus(tiny_data / "corpus.jsonl")
    gold = load_gold(tiny_data / "gold.jsonl")
    assert len(corpus) == len(gold) == 12
    echo = json.loads((tiny_data / "config.json").read_text())
    assert echo["seed"] == 9
    # every field is echoed with its resolved value, defaults included
    assert echo["synth"] == dict(SynthConfig().to_dict(), questions=12,
                                 pool_size=6, vocab_size=90,
                                 distractor_rate=0.5)


def test_gen_synth_same_seed_rewrites_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("gen-synth", "--out", out, "--seed", 4,
                   "--config", write_json(tmp_path / "c.json",
                                          {"questions": 8})) == 0
    assert (a / "corpus.jsonl").read_bytes() == (b / "corpus.jsonl").read_bytes()
    assert (a / "gold.jsonl").read_bytes() == (b / "gold.jsonl").read_bytes()


def test_gen_synth_requires_seed(tmp_path):
    with pytest.raises(SystemExit):
        run("gen-synth", "--out", tmp_path / "x")


def test_extract_chains_matches_library(tiny_data, tmp_path):
    out = tmp_path / "chains.jsonl"
    assert run("extract-chains", "--corpus", tiny_data / "corpus.jsonl",
               "--hops", 2, "--out", out) == 0
    corpus = load_corpus(tiny_data / "corpus.jsonl")
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert [l["id"] for l in lines] == [inst.id for inst in corpus]
    for inst, rec in zip(corpus, lines):
        want = [{"passages": list(c.passage_ids), "links": list(c.links)}
                for c in extract_chains_2hop(inst)]
        assert rec["chains"] == want


@pytest.fixture()
def trained(tiny_data, tmp_path):
    cfg = write_json(tmp_path / "train.json",
                     {"train": {"episodes": 24, "learning_rate": 0.2},
                      "model": {"embed_dim": 6, "hidden_dim": 4,
                                "match_hidden": 5},
                      "reasoner": {"embed_dim": 6, "hidden_dim": 4}})
    out = tmp_path / "run"
    assert run("train", "--corpus", tiny_data / "corpus.jsonl",
               "--mode", "ranker", "--config", cfg, "--out", out,
               "--seed", 2) == 0
    return out


def test_train_writes_checkpoint_log_preds_and_echo(trained, tiny_data):
    for name in ("ranker.ckpt", "log.jsonl", "preds.jsonl", "config.json"):
        assert (trained / name).exists(), name
    echo = json.loads((trained / "config.json").read_text())
    assert echo["mode"] == "ranker" and echo["seed"] == 2
    assert echo["train"]["episodes"] == 24
    assert echo["train"]["baseline_decay"] == 0.9  # default, still echoed
    from chainrec.training import infer_vocab
    corpus = load_corpus(tiny_data / "corpus.jsonl")
    assert echo["model"]["vocab_size"] == infer_vocab(corpus)  # from the corpus
    preds = [json.loads(l) for l in (trained / "preds.jsonl").read_text().splitlines()]
    assert len(preds) == 12 and all(len(p["chain"]["passages"]) == 2 for p in preds)


def test_train_default_budget_is_five_sweeps(tiny_data, tmp_path):
    out = tmp_path / "run_default"
    assert run("train", "--corpus", tiny_data / "corpus.jsonl", "--mode",
               "independent", "--out", out, "--seed", 0) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["train"]["episodes"] == 60


def test_train_rejects_unknown_config_section(tiny_data, tmp_path):
    cfg = write_json(tmp_path / "bad.json", {"optimizer": {"lr": 1.0}})
    assert run("train", "--corpus", tiny_data / "corpus.jsonl", "--mode",
               "ranker", "--config", cfg, "--out", tmp_path / "x",
               "--seed", 0) == 2


def test_warm_start_restricted_to_cooperative(tiny_data, tmp_path):
    assert run("train", "--corpus", tiny_data / "corpus.jsonl", "--mode",
               "ranker", "--out", tmp_path / "x", "--seed", 0,
               "--warm", tmp_path / "nope.ckpt") == 2


def test_cooperative_training_warm_starts_from_checkpoint(trained, tiny_data,
                                                          tmp_path):
    out = tmp_path / "coop"
    cfg = write_json(tmp_path / "coop.json",
                     {"train": {"episodes": 24},
                      "model": {"embed_dim": 6, "hidden_dim": 4,
                                "match_hidden": 5},
                      "reasoner": {"embed_dim": 6, "hidden_dim": 4}})
    assert run("train", "--corpus", tiny_data / "corpus.jsonl",
               "--mode", "cooperative", "--config", cfg, "--out", out,
               "--seed", 7, "--warm", trained / "ranker.ckpt") == 0
    assert (out / "reasoner.ckpt").exists()
    echo = json.loads((out / "config.json").read_text())
    assert echo["warm"].endswith("ranker.ckpt")
    assert echo["reasoner"]["vocab_size"] > 0


def test_eval_report_matches_library_scoring(trained, tiny_data, tmp_path):
    report_path = tmp_path / "report.json"
    assert run("eval", "--corpus", tiny_data / "corpus.jsonl",
               "--gold", tiny_data / "gold.jsonl",
               "--preds", trained / "preds.jsonl",
               "--mode", "passage_em", "--report", report_path) == 0
    report = json.loads(report_path.read_text())
    from chainrec.corpus import load_predictions
    want = evaluate_predictions(load_predictions(trained / "preds.jsonl"),
                                load_gold(tiny_data / "gold.jsonl"),
                                mode="passage_em")
    assert report["passage_em"] == want.passage_em
    assert report["mode"] == "passage_em"
    assert report["config"]["mode"] == "passage_em"


def test_eval_rejects_gold_ids_outside_corpus(trained, tiny_data, tmp_path):
    gold = load_gold(tiny_data / "gold.jsonl")
    rogue = tmp_path / "rogue.jsonl"
    lines = (tiny_data / "gold.jsonl").read_text().splitlines()
    lines[0] = lines[0].replace(gold[0].question_id, "q-unknown")
    rogue.write_text("\n".join(lines) + "\n")
    assert run("eval", "--corpus", tiny_data / "corpus.jsonl",
               "--gold", rogue, "--preds", trained / "preds.jsonl",
               "--mode", "passage_em", "--report", tmp_path / "r.json") == 2


def test_benchmark_requires_master_seed(tmp_path):
    assert run("benchmark", "--out", tmp_path / "bench") == 2


def test_benchmark_tiny_suite_writes_reports(tmp_path, capsys):
    suite = write_json(tmp_path / "suite.json", {
        "num_seeds": 1, "train_questions": 16, "dev_questions": 8,
        "epochs": 1, "cooperative_epochs": 1, "trials": 40,
        "ablation_train_questions": 16,
        "embed_dim": 6, "hidden_dim": 4, "match_hidden": 5,
        "reasoner_embed_dim": 6, "reasoner_hidden_dim": 4})
    out = tmp_path / "bench"
    assert run("benchmark", "--suite", suite, "--out", out, "--seed", 5) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["suite"]["seed"] == 5
    assert set(report["cells"]) == {"main", "ambiguous"}
    printed = capsys.readouterr().out
    assert "cooperative" in printed and "tail_first" in printed


def test_gradcheck_exit_code_tracks_failures(monkeypatch):
    class Fake:
        def __init__(self, passed):
            self.passed = passed
            self.max_rel_error = 0.0 if passed else 1.0

    monkeypatch.setattr(cli, "run_full_suite", lambda seed: {"op.add": Fake(True)})
    monkeypatch.setattr(cli, "format_report", lambda reports: "ok")
    assert run("gradcheck", "--seed", 0) == 0
    monkeypatch.setattr(cli, "run_full_suite", lambda seed: {"op.add": Fake(False)})
    assert run("gradcheck") == 1
