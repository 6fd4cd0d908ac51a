"""Chain-level metrics, baselines, and evaluation reports.

Two correctness modes: ``passage_em`` treats a prediction as correct when
its passage set equals some gold chain's passage set (order and links
ignored); ``full_chain`` requires the predicted chain to be a member of
the gold chain set, links and order included. Instances flagged ambiguous
are excluded from the order-sensitive mode and from head/tail recall.

Questions with an empty predicted chain (no candidate was available at
inference) count as incorrect everywhere; the fraction that produced any
chain at all is reported separately as coverage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .corpus import (
    CandidateChain, GoldAnnotation, Prediction,
    extract_chains_2hop, extract_chains_3hop,
)
from .ranker import decode_from_candidates
from .reasoner import entity_distribution
from .training import TrainConfig, train_independent

__all__ = [
    "EvalReport",
    "MetricError",
    "MODES",
    "RandomBaselineReport",
    "chain_accuracy",
    "evaluate_predictions",
    "head_tail_recall",
    "independent_baseline",
    "predict_chains",
    "random_baseline",
]

MODES = ("passage_em", "full_chain")


class MetricError(ValueError):
    """Predictions and gold annotations do not line up."""


@dataclass
class EvalReport:
    """Per-question judgements plus the aggregate rates.

    ``chain_accuracy`` is the rate for ``mode``; both underlying rates are
    always present. Every rate comes with its denominator: a rate whose
    denominator is zero is reported as 0.0 or None with an explanatory
    note appended.
    """
    mode: str
    chain_accuracy: float
    passage_em: float
    full_chain_accuracy: float
    head_recall: float | None
    tail_recall: float | None
    coverage: float
    total: int
    chain_evaluated: int
    passage_em_evaluated: int
    recall_evaluated: int
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _pair_up(preds, gold):
    by_id = {}
    for p in preds:
        if p.question_id in by_id:
            raise MetricError(f"duplicate prediction for {p.question_id!r}")
        by_id[p.question_id] = p
    seen = set()
    pairs = []
    for g in gold:
        if g.question_id in seen:
            raise MetricError(f"duplicate gold annotation for {g.question_id!r}")
        seen.add(g.question_id)
        if g.question_id not in by_id:
            raise MetricError(f"no prediction for question {g.question_id!r}")
        pairs.append((by_id[g.question_id], g))
    extra = set(by_id) - seen
    if extra:
        raise MetricError(f"predictions for unknown questions: {sorted(extra)[:5]}")
    return pairs


def _judge(pred: Prediction, g: GoldAnnotation) -> dict:
    predicted = bool(pred.passage_ids)
    em = predicted and any(set(pred.passage_ids) == set(c.passage_ids)
                           for c in g.gold_chains)
    full = (predicted
            and any(pred.passage_ids == c.passage_ids and pred.links == c.links
                    for c in g.gold_chains))
    rec = {"id": g.question_id, "predicted": predicted, "ambiguous": g.ambiguous,
           "passage_em": em, "full_chain": None if g.ambiguous else full}
    if g.ambiguous:
        rec["head"] = rec["tail"] = None
    else:
        heads = {c.passage_ids[0] for c in g.gold_chains}
        tails = {c.passage_ids[-1] for c in g.gold_chains}
        rec["head"] = predicted and pred.passage_ids[0] in heads
        rec["tail"] = predicted and pred.passage_ids[-1] in tails
    return rec


def evaluate_predictions(preds, gold, mode: str = "full_chain",
                         config: dict | None = None) -> EvalReport:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    pairs = _pair_up(preds, gold)
    if not pairs:
        raise MetricError("nothing to evaluate: gold file is empty")

    records = [_judge(p, g) for p, g in pairs]
    notes: list[str] = []
    total = len(records)
    em_hits = sum(r["passage_em"] for r in records)
    unamb = [r for r in records if not r["ambiguous"]]
    full_hits = sum(r["full_chain"] for r in unamb)

    passage_em = em_hits / total
    if unamb:
        full_acc = full_hits / len(unamb)
        head_recall = sum(r["head"] for r in unamb) / len(unamb)
        tail_recall = sum(r["tail"] for r in unamb) / len(unamb)
    else:
        full_acc = 0.0
        head_recall = tail_recall = None
        notes.append("all instances ambiguous: full_chain accuracy, head "
                     "and tail recall are undefined")

    return EvalReport(
        mode=mode,
        chain_accuracy=passage_em if mode == "passage_em" else full_acc,
        passage_em=passage_em,
        full_chain_accuracy=full_acc,
        head_recall=head_recall,
        tail_recall=tail_recall,
        coverage=sum(r["predicted"] for r in records) / total,
        total=total,
        chain_evaluated=total if mode == "passage_em" else len(unamb),
        passage_em_evaluated=total,
        recall_evaluated=len(unamb),
        records=records,
        config=dict(config or {}),
        notes=notes,
    )


def chain_accuracy(preds, gold, mode: str) -> float:
    return evaluate_predictions(preds, gold, mode).chain_accuracy


def head_tail_recall(preds, gold):
    """(head, tail) recall over the unambiguous instances; (None, None)
    when there are none."""
    report = evaluate_predictions(preds, gold, "full_chain")
    return report.head_recall, report.tail_recall


@dataclass
class RandomBaselineReport:
    estimate: float
    exact: float
    stderr: float
    trials: int
    questions: int

    def to_dict(self) -> dict:
        return asdict(self)


def random_baseline(candidate_sets, gold, trials: int = 1000,
                    seed: int | None = None) -> RandomBaselineReport:
    """Uniform pick from each question's candidate set, Monte-Carlo style.

    ``candidate_sets`` is one list of chains per gold annotation, in the
    same order. Returns the sampled estimate, the exact expectation
    sum_q (#gold in C_q) / |C_q| / #q, and the binomial-approximation
    standard error over trials * questions draws. Empty candidate sets
    count as always-wrong.
    """
    if seed is None:
        raise ValueError("random_baseline needs an explicit seed")
    if len(candidate_sets) != len(gold):
        raise MetricError(
            f"{len(candidate_sets)} candidate sets for {len(gold)} annotations")
    if not gold:
        raise MetricError("nothing to evaluate: gold set is empty")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 4001)))

    exact_terms = []
    hits = 0
    for C, g in zip(candidate_sets, gold):
        golds = set(g.gold_chains)
        if not C:
            exact_terms.append(0.0)
            continue
        good = sum(1 for c in C if c in golds)
        exact_terms.append(good / len(C))
        draws = rng.integers(0, len(C), size=trials)
        hits += int(sum(1 for d in draws if C[d] in golds))

    n = trials * len(gold)
    estimate = hits / n
    stderr = float(np.sqrt(max(estimate * (1.0 - estimate), 1e-12) / n))
    return RandomBaselineReport(
        estimate=estimate,
        exact=float(np.mean(exact_terms)),
        stderr=stderr,
        trials=trials,
        questions=len(gold),
    )


def _joint_best(inst, candidates, hops, params, direction, conditional,
                reasoner_params):
    """Best chain by selection log-likelihood plus the reader's
    log-probability of the chain's final link given its final passage.

    Ties break to the lexicographically smallest chain; the reader
    distribution is computed once per distinct final passage.
    """
    dists: dict = {}
    best = None
    for c in sorted(set(candidates), key=CandidateChain.sort_key):
        _, lp = decode_from_candidates(inst, [c], hops, params, direction,
                                       conditional, return_logprob=True)
        pid = c.passage_ids[-1]
        if pid not in dists:
            d = entity_distribution(inst, inst.passage_by_id(pid),
                                    inst.question_tokens, reasoner_params)
            dists[pid] = dict(d.entries)
        p = dists[pid].get(c.links[-1], 0.0)
        score = lp + math.log(max(p, 1e-300))
        if best is None or score > best[0]:
            best = (score, c)
    return best[1], best[0]


def predict_chains(corpus, params, hops: int = 2, direction: str = "tail_first",
                   conditional: bool = True,
                   reasoner_params=None) -> list[Prediction]:
    """Rank each instance's candidate set; empty sets give an empty
    prediction with logprob 0.0.

    With ``reasoner_params`` each chain's score also adds the entity
    reader's log-probability of the chain's final link, which separates
    chains whose passages the selection model scores identically."""
    extract = extract_chains_2hop if hops == 2 else extract_chains_3hop
    preds = []
    for inst in corpus:
        C = extract(inst)
        if not C:
            preds.append(Prediction(inst.id, (), None, 0.0))
            continue
        if reasoner_params is None:
            chain, lp = decode_from_candidates(inst, C, hops, params, direction,
                                               conditional, return_logprob=True)
        else:
            chain, lp = _joint_best(inst, C, hops, params, direction,
                                    conditional, reasoner_params)
        preds.append(Prediction(inst.id, chain.passage_ids, chain.links, lp))
    return preds


def independent_baseline(corpus, gold, cfg: TrainConfig, model_cfg=None,
                         eval_corpus=None, eval_gold=None,
                         mode: str = "full_chain"):
    """Train the unconditional ranker and score it; returns (params, report).

    The evaluation split defaults to the training corpus. The report
    config echoes the training configuration.
    """
    res = train_independent(corpus, cfg, model_cfg=model_cfg)
    target = corpus if eval_corpus is None else eval_corpus
    target_gold = gold if eval_gold is None else eval_gold
    preds = predict_chains(target, res.params, hops=cfg.hops,
                           direction=cfg.direction, conditional=False)
    report = evaluate_predictions(preds, target_gold, mode,
                                  config=cfg.to_dict())
    return res.params, report
