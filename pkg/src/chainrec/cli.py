"""Command line front end.

Every subcommand that involves randomness takes an explicit --seed (or,
for benchmark, reads one from the suite file); there is no wall-clock
seeding anywhere, so rerunning a command with the same inputs rewrites
the same bytes. Resolved configurations, defaults included, are echoed
next to each command's outputs.
"""

import argparse
import json
import sys
from pathlib import Path

from .benchmark import BenchmarkConfig, run_benchmark
from .corpus import (
    extract_chains_2hop,
    extract_chains_3hop,
    load_corpus,
    load_gold,
    load_predictions,
    save_corpus,
    save_gold,
    save_predictions,
)
from .gradcheck import format_report, run_full_suite
from .layers import ParameterSet
from .metrics import MetricError, evaluate_predictions, predict_chains
from .ranker import RankerConfig
from .reasoner import ReasonerConfig
from .synth import ConfigError, SynthConfig, generate_synthetic
from .training import TrainConfig, infer_vocab, train_cooperative, train_ranker

TRAIN_MODES = ("ranker", "independent", "cooperative")
EVAL_MODES = ("passage_em", "full_chain")


class CliError(Exception):
    pass


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"no such file: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"{path} is not valid JSON: {e}")


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seed_u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit int")
    return value


def _cmd_gen_synth(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise CliError("synth config must be a JSON object")
    cfg = SynthConfig.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    instances, gold = generate_synthetic(cfg, args.seed)
    save_corpus(instances, out / "corpus.jsonl")
    save_gold(gold, out / "gold.jsonl")
    _write_json({"seed": args.seed, "synth": cfg.to_dict()}, out / "config.json")
    print(f"wrote {len(instances)} questions to {out}")
    return 0


def _cmd_extract_chains(args) -> int:
    corpus = load_corpus(args.corpus)
    extract = extract_chains_2hop if args.hops == 2 else extract_chains_3hop
    with open(args.out, "w", encoding="utf-8") as fh:
        for inst in corpus:
            chains = [{"passages": list(c.passage_ids), "links": list(c.links)}
                      for c in extract(inst)]
            fh.write(json.dumps({"id": inst.id, "chains": chains},
                                separators=(",", ":")) + "\n")
    print(f"extracted candidate chains for {len(corpus)} questions to {args.out}")
    return 0


def _split_train_config(raw, corpus, seed):
    """Resolve the three config sections, filling defaults from the corpus."""
    if not isinstance(raw, dict):
        raise CliError("train config must be a JSON object")
    unknown = set(raw) - {"train", "model", "reasoner"}
    if unknown:
        raise CliError(f"unknown train config sections: {sorted(unknown)} "
                       "(expected 'train', 'model', 'reasoner')")
    cfg = TrainConfig.from_dict(dict(raw.get("train", {}), seed=seed))
    if cfg.episodes == 0:
        # default budget: five sweeps over the corpus
        cfg.episodes = 5 * len(corpus)

    model_raw = dict(raw.get("model", {}))
    reasoner_raw = dict(raw.get("reasoner", {}))
    vocab = infer_vocab(corpus)
    model_raw.setdefault("vocab_size", vocab)
    reasoner_raw.setdefault("vocab_size", vocab)
    model_cfg = RankerConfig.from_dict(model_raw)
    reasoner_cfg = ReasonerConfig.from_dict(reasoner_raw)
    cfg.validate()
    return cfg, model_cfg, reasoner_cfg


def _cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise CliError(f"{args.corpus} holds no questions")
    raw = _read_json(args.config) if args.config else {}
    cfg, model_cfg, reasoner_cfg = _split_train_config(raw, corpus, args.seed)
    if args.warm and args.mode != "cooperative":
        raise CliError("--warm only applies to cooperative training")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.jsonl"
    ckpt = out / "ranker.ckpt"
    echo = {"mode": args.mode, "seed": args.seed, "corpus": str(args.corpus),
            "train": cfg.to_dict(), "model": model_cfg.to_dict()}

    if args.mode == "cooperative":
        if args.warm:
            warm, _ = ParameterSet.load(args.warm)
        else:
            # no warm checkpoint given: fit the selection model first
            warm = train_ranker(corpus, cfg, model_cfg).params
        res = train_cooperative(corpus, cfg, warm, reasoner_cfg=reasoner_cfg,
                                log_path=log_path)
        res.reasoner_params.save(out / "reasoner.ckpt")
        echo["reasoner"] = reasoner_cfg.to_dict()
        echo["warm"] = str(args.warm) if args.warm else None
        reasoner_params = res.reasoner_params
    else:
        res = train_ranker(corpus, cfg, model_cfg,
                           conditional=args.mode == "ranker",
                           checkpoint_path=ckpt, log_path=log_path)
        reasoner_params = None
    res.params.save(ckpt)

    preds = predict_chains(corpus, res.params, hops=cfg.hops,
                           direction=cfg.direction,
                           conditional=args.mode != "independent",
                           reasoner_params=reasoner_params)
    save_predictions(preds, out / "preds.jsonl")
    _write_json(echo, out / "config.json")
    print(f"trained {args.mode} model on {len(corpus)} questions; "
          f"artifacts in {out}")
    return 0


def _cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    gold = load_gold(args.gold)
    preds = load_predictions(args.preds)
    known = {inst.id for inst in corpus}
    missing = sorted(g.question_id for g in gold if g.question_id not in known)
    if missing:
        raise CliError(f"gold ids absent from corpus: {missing[:5]}"
                       + (" ..." if len(missing) > 5 else ""))
    report = evaluate_predictions(preds, gold, mode=args.mode,
                                  config={"corpus": str(args.corpus),
                                          "gold": str(args.gold),
                                          "preds": str(args.preds),
                                          "mode": args.mode})
    _write_json(report.to_dict(), args.report)
    print(f"{args.mode} accuracy {report.chain_accuracy:.4f} "
          f"over {report.chain_evaluated} questions (report: {args.report})")
    return 0


def _cmd_benchmark(args) -> int:
    raw = _read_json(args.suite) if args.suite else {}
    if not isinstance(raw, dict):
        raise CliError("benchmark suite must be a JSON object")
    if args.seed is None and raw.get("seed") is None:
        raise CliError("benchmark needs a master seed: pass --seed or put "
                       "\"seed\" in the suite file")
    cfg = BenchmarkConfig.from_dict(raw)
    result = run_benchmark(cfg, args.out, seed=args.seed)
    print(result.tables)
    print(f"benchmark artifacts in {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = run_full_suite(seed=args.seed)
    print(format_report(reports))
    return 0 if all(r.passed for r in reports.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="chainrec",
        description="Recover multi-hop reasoning chains from question-answer "
                    "supervision: generate corpora, extract candidates, train "
                    "selection models, and score predictions.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic corpus with "
                       "planted reasoning chains")
    g.add_argument("--config", help="SynthConfig JSON (defaults when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", required=True, type=_seed_u64)
    g.set_defaults(func=_cmd_gen_synth)

    x = sub.add_parser("extract-chains", help="write each question's candidate "
                       "chain set as JSON lines")
    x.add_argument("--corpus", required=True)
    x.add_argument("--hops", required=True, type=int, choices=(2, 3))
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_extract_chains)

    t = sub.add_parser("train", help="train a chain selection model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--mode", required=True, choices=TRAIN_MODES,
                   help="ranker: conditional selection; independent: frozen "
                        "query ablation; cooperative: ranker plus entity reasoner")
    t.add_argument("--config", help="JSON with optional 'train', 'model', "
                   "'reasoner' sections")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", required=True, type=_seed_u64)
    t.add_argument("--warm", help="ranker checkpoint to warm-start cooperative "
                   "training (otherwise a ranker phase runs first)")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="score a prediction file against gold chains")
    e.add_argument("--corpus", required=True)
    e.add_argument("--gold", required=True)
    e.add_argument("--preds", required=True)
    e.add_argument("--mode", required=True, choices=EVAL_MODES)
    e.add_argument("--report", required=True, help="where to write the report JSON")
    e.set_defaults(func=_cmd_eval)

    b = sub.add_parser("benchmark", help="run the full method comparison")
    b.add_argument("--suite", help="BenchmarkConfig JSON (defaults when omitted)")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--seed", type=_seed_u64,
                   help="master seed (overrides the suite file)")
    b.set_defaults(func=_cmd_benchmark)

    c = sub.add_parser("gradcheck", help="finite-difference checks over every "
                       "differentiable component")
    c.add_argument("--seed", type=_seed_u64, default=0)
    c.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, MetricError, ValueError, OSError) as e:
        print(f"chainrec: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
