"""Benchmark harness: every method scored on shared generated corpora.

One run covers each configured dataset with the four methods (random,
independent, conditional, cooperative) over the same per-seed corpora,
plus a direction ablation that trains the conditional model tail-first
and head-first on a suite where answer-bearing passages are rarer than
head candidates. Artifacts land under the output directory:

- ``report.json``   machine-readable cells and the full resolved config
- ``report.txt``    plain-text method-by-dataset and ablation tables
- ``corpora/``      the generated train/dev splits and gold files
- ``checkpoints/``  trained parameters per dataset, method and seed
- ``timing.json``   wall-clock seconds per stage

Reruns with the same master seed are bit-identical in everything except
``timing.json``.

The cooperative arm warm-starts from the conditional arm's weights (the
game refines a trained ranker rather than learning from scratch), and its
predictions score chains jointly with the entity reader.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .corpus import extract_chains_2hop, save_corpus, save_gold
from .metrics import evaluate_predictions, predict_chains, random_baseline
from .ranker import RankerConfig
from .reasoner import ReasonerConfig
from .synth import SynthConfig, generate_synthetic
from .training import TrainConfig, train_cooperative, train_independent, train_ranker

__all__ = ["BenchmarkConfig", "BenchmarkResult", "run_benchmark", "METHODS"]

METHODS = ("random", "independent", "conditional", "cooperative")
DIRECTIONS = ("tail_first", "head_first")

DEFAULT_DATASETS = {
    "main": {"pool_size": 6, "distractor_rate": 0.8,
             "hard_decoy_rate": 0.2, "crossed_rate": 0.3},
    "ambiguous": {"pool_size": 6, "distractor_rate": 0.8,
                  "hard_decoy_rate": 0.0, "ambiguous_link_rate": 0.5},
}
DEFAULT_ABLATION = {"pool_size": 9, "distractor_rate": 1.0,
                    "hard_decoy_rate": 0.0, "crossed_rate": 1.0,
                    "crossed_heads": 4, "second_tail_rate": 1.0}


@dataclass
class BenchmarkConfig:
    """Suite configuration; every field has a default echoed into reports.

    ``datasets`` maps a name to synthetic-generator overrides; question
    counts and vocabulary come from the suite-level fields. ``seed`` is
    the master seed every stream is derived from and must be set (by the
    file or the --seed flag) before running.
    """
    seed: int | None = None
    num_seeds: int = 3
    train_questions: int = 1000
    dev_questions: int = 200
    vocab_size: int = 120
    epochs: int = 6
    cooperative_epochs: int = 3
    learning_rate: float = 0.3
    embed_dim: int = 10
    hidden_dim: int = 6
    match_hidden: int = 8
    reasoner_embed_dim: int = 8
    reasoner_hidden_dim: int = 6
    trials: int = 1000
    datasets: dict = field(default_factory=lambda: dict(DEFAULT_DATASETS))
    ablation: dict = field(default_factory=lambda: dict(DEFAULT_ABLATION))
    ablation_train_questions: int = 600
    save_corpora: bool = True
    save_checkpoints: bool = True

    def validate(self) -> None:
        if self.seed is None:
            raise ValueError("benchmark needs a master seed (suite file "
                             "\"seed\" or --seed)")
        if self.num_seeds < 1:
            raise ValueError("num_seeds must be positive")
        if not self.datasets:
            raise ValueError("no datasets configured")
        for name in self.datasets:
            if not isinstance(name, str) or not name:
                raise ValueError(f"dataset names must be strings, got {name!r}")
        for spec in self._synth_configs().values():
            spec.validate()

    def _synth(self, overrides: dict, questions: int) -> SynthConfig:
        merged = {"questions": questions, "vocab_size": self.vocab_size}
        merged.update(overrides)
        return SynthConfig.from_dict(merged)

    def _synth_configs(self) -> dict:
        out = {}
        for name, over in self.datasets.items():
            out[name] = self._synth(over, self.train_questions)
        out["__ablation__"] = self._synth(self.ablation,
                                          self.ablation_train_questions)
        return out

    def model_config(self) -> RankerConfig:
        return RankerConfig(vocab_size=self.vocab_size, embed_dim=self.embed_dim,
                            hidden_dim=self.hidden_dim,
                            match_hidden=self.match_hidden)

    def reasoner_config(self) -> ReasonerConfig:
        return ReasonerConfig(vocab_size=self.vocab_size,
                              embed_dim=self.reasoner_embed_dim,
                              hidden_dim=self.reasoner_hidden_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "BenchmarkConfig":
        known = set(BenchmarkConfig.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown benchmark config fields: {sorted(bad)}")
        return BenchmarkConfig(**d)


@dataclass
class BenchmarkResult:
    config: dict
    cells: dict          # dataset -> method -> {"mean", "per_seed": [...]}
    ablation: dict       # direction -> {"mean", "per_seed": [...]}
    tables: str
    timing: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "cells": self.cells,
                "ablation": self.ablation, "tables": self.tables}


def _derive(master: int, *path: int) -> int:
    """Independent integer seed for one (dataset, seed, stage) slot."""
    ss = np.random.SeedSequence((int(master),) + tuple(int(p) for p in path))
    return int(ss.generate_state(1)[0])


def _summary(report) -> dict:
    return {
        "full_chain": report.full_chain_accuracy,
        "passage_em": report.passage_em,
        "head_recall": report.head_recall,
        "tail_recall": report.tail_recall,
        "coverage": report.coverage,
    }


def _mean(per_seed, key) -> float:
    return float(np.mean([r[key] for r in per_seed]))


class _Runner:
    def __init__(self, cfg: BenchmarkConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.timing: dict = {}

    def _tick(self, label: str, t0: float) -> None:
        self.timing[label] = round(time.time() - t0, 3)

    def _save_split(self, dataset, seed_idx, split, corpus, gold) -> None:
        if not self.cfg.save_corpora:
            return
        d = self.out / "corpora" / dataset
        d.mkdir(parents=True, exist_ok=True)
        save_corpus(corpus, d / f"seed{seed_idx}.{split}.jsonl")
        save_gold(gold, d / f"seed{seed_idx}.{split}.gold.jsonl")

    def _save_params(self, tag: str, params) -> None:
        if not self.cfg.save_checkpoints:
            return
        d = self.out / "checkpoints"
        d.mkdir(parents=True, exist_ok=True)
        params.save(d / f"{tag}.ckpt", extra={"tag": tag})

    def _splits(self, d_idx, dataset, overrides, seed_idx, n_train):
        cfg = self.cfg
        train_cfg = cfg._synth(overrides, n_train)
        dev_cfg = cfg._synth(overrides, cfg.dev_questions)
        train, train_gold = generate_synthetic(
            train_cfg, _derive(cfg.seed, d_idx, seed_idx, 0))
        dev, dev_gold = generate_synthetic(
            dev_cfg, _derive(cfg.seed, d_idx, seed_idx, 1))
        self._save_split(dataset, seed_idx, "train", train, train_gold)
        self._save_split(dataset, seed_idx, "dev", dev, dev_gold)
        return train, dev, dev_gold

    def _train_cfg(self, episodes, seed, direction="tail_first") -> TrainConfig:
        return TrainConfig(episodes=episodes, seed=seed,
                           learning_rate=self.cfg.learning_rate,
                           direction=direction)

    def run_dataset(self, d_idx: int, dataset: str, overrides: dict) -> dict:
        cfg = self.cfg
        model = cfg.model_config()
        per = {m: [] for m in METHODS}
        for s in range(cfg.num_seeds):
            t0 = time.time()
            train, dev, dev_gold = self._splits(d_idx, dataset, overrides, s,
                                                cfg.train_questions)
            C_dev = [extract_chains_2hop(inst) for inst in dev]
            rb = random_baseline(C_dev, dev_gold, trials=cfg.trials,
                                 seed=_derive(cfg.seed, d_idx, s, 5))
            per["random"].append({"full_chain": rb.exact,
                                  "mc_estimate": rb.estimate,
                                  "mc_stderr": rb.stderr})

            episodes = cfg.epochs * len(train)
            res_i = train_independent(
                train, self._train_cfg(episodes, _derive(cfg.seed, d_idx, s, 2)),
                model_cfg=model)
            preds = predict_chains(dev, res_i.params, conditional=False)
            per["independent"].append(_summary(
                evaluate_predictions(preds, dev_gold)))
            self._save_params(f"{dataset}.independent.seed{s}", res_i.params)

            res_c = train_ranker(
                train, self._train_cfg(episodes, _derive(cfg.seed, d_idx, s, 3)),
                model_cfg=model)
            preds = predict_chains(dev, res_c.params, conditional=True)
            per["conditional"].append(_summary(
                evaluate_predictions(preds, dev_gold)))
            self._save_params(f"{dataset}.conditional.seed{s}", res_c.params)

            coop_cfg = self._train_cfg(cfg.cooperative_epochs * len(train),
                                       _derive(cfg.seed, d_idx, s, 4))
            res_k = train_cooperative(train, coop_cfg, warm_ranker=res_c.params,
                                      reasoner_cfg=cfg.reasoner_config())
            preds = predict_chains(dev, res_k.params,
                                   reasoner_params=res_k.reasoner_params)
            per["cooperative"].append(_summary(
                evaluate_predictions(preds, dev_gold)))
            self._save_params(f"{dataset}.cooperative.seed{s}", res_k.params)
            self._save_params(f"{dataset}.cooperative.reasoner.seed{s}",
                              res_k.reasoner_params)
            self._tick(f"{dataset}.seed{s}", t0)

        cells = {}
        for m in METHODS:
            cells[m] = {"mean": _mean(per[m], "full_chain"), "per_seed": per[m]}
        return cells

    def run_ablation(self) -> dict:
        cfg = self.cfg
        d_idx = 1000  # stream namespace away from the datasets
        model = cfg.model_config()
        per = {d: [] for d in DIRECTIONS}
        for s in range(cfg.num_seeds):
            t0 = time.time()
            train, dev, dev_gold = self._splits(
                d_idx, "ablation", cfg.ablation, s, cfg.ablation_train_questions)
            episodes = cfg.epochs * len(train)
            for k, direction in enumerate(DIRECTIONS):
                res = train_ranker(
                    train,
                    self._train_cfg(episodes, _derive(cfg.seed, d_idx, s, 6 + k),
                                    direction),
                    model_cfg=model)
                preds = predict_chains(dev, res.params, direction=direction)
                per[direction].append(_summary(
                    evaluate_predictions(preds, dev_gold)))
                self._save_params(f"ablation.{direction}.seed{s}", res.params)
            self._tick(f"ablation.seed{s}", t0)
        return {d: {"mean": _mean(per[d], "full_chain"), "per_seed": per[d]}
                for d in DIRECTIONS}


def _format_tables(cfg: BenchmarkConfig, cells: dict, ablation: dict) -> str:
    names = list(cells)
    w = max(12, *(len(n) + 2 for n in names))
    lines = ["chain accuracy (mean over "
             f"{cfg.num_seeds} seeds, dev full-chain match)", ""]
    lines.append("method".ljust(14) + "".join(n.rjust(w) for n in names))
    for m in METHODS:
        row = m.ljust(14)
        for n in names:
            row += f"{100 * cells[n][m]['mean']:.1f}".rjust(w)
        lines.append(row)
    lines += ["", "direction ablation (conditional model)", ""]
    lines.append("direction".ljust(14) + "accuracy".rjust(10)
                 + "head_recall".rjust(13) + "tail_recall".rjust(13))
    for d in DIRECTIONS:
        row = ablation[d]
        lines.append(d.ljust(14)
                     + f"{100 * row['mean']:.1f}".rjust(10)
                     + f"{100 * _mean(row['per_seed'], 'head_recall'):.1f}".rjust(13)
                     + f"{100 * _mean(row['per_seed'], 'tail_recall'):.1f}".rjust(13))
    return "\n".join(lines) + "\n"


def run_benchmark(suite, out_dir, seed: int | None = None) -> BenchmarkResult:
    """Run the full comparison described by ``suite`` into ``out_dir``.

    ``suite`` is a BenchmarkConfig or its dict form; ``seed`` overrides
    the suite's master seed. Everything except timing.json is a pure
    function of the resolved configuration.
    """
    cfg = suite if isinstance(suite, BenchmarkConfig) else BenchmarkConfig.from_dict(suite)
    if seed is not None:
        cfg = BenchmarkConfig.from_dict({**cfg.to_dict(), "seed": int(seed)})
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    runner = _Runner(cfg, out)
    t_all = time.time()
    cells = {}
    for d_idx, dataset in enumerate(sorted(cfg.datasets)):
        cells[dataset] = runner.run_dataset(d_idx, dataset,
                                            cfg.datasets[dataset])
    ablation = runner.run_ablation()
    runner.timing["total"] = round(time.time() - t_all, 3)

    tables = _format_tables(cfg, cells, ablation)
    config_echo = {
        "suite": cfg.to_dict(),
        "resolved_datasets": {n: c.to_dict()
                              for n, c in cfg._synth_configs().items()},
        "model": cfg.model_config().to_dict(),
        "reasoner": cfg.reasoner_config().to_dict(),
        "train_defaults": TrainConfig(episodes=0, seed=0).to_dict(),
    }
    result = BenchmarkResult(config=config_echo, cells=cells,
                             ablation=ablation, tables=tables,
                             timing=dict(runner.timing))
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(result.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    (out / "report.txt").write_text(tables, encoding="utf-8")
    with open(out / "timing.json", "w", encoding="utf-8") as f:
        json.dump(runner.timing, f, indent=2, sort_keys=True)
        f.write("\n")
    return result
