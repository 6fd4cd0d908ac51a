"""Policy-gradient training of the ranker and the cooperative game.

The ranker is trained with REINFORCE: sample a selection episode over the
full passage pool, score each step against the candidate-chain structure
(set membership for head/tail picks, exact-path membership for the middle
pick), subtract a per-step moving-average baseline, and apply a clipped
SGD update on the summed -advantage * logprob surrogate.

Cooperative training alternates phases over a warm-started ranker: in
reasoner phases the ranker is frozen and the reasoner learns to name the
linking entity of selections that earned reward; in ranker phases the
reasoner is frozen and one step's reward is upgraded to 1 + bonus when
the reasoner's predicted entity shows up in the passage that step picked.

Nothing in here reads gold annotations; supervision comes entirely from
the candidate chains extracted from (question, answer) pairs.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, backward, mul
from .corpus import (
    QuestionInstance,
    extract_chains_2hop,
    extract_chains_3hop,
    head_tail_sets,
)
from .layers import ParameterSet
from .ranker import (
    DIRECTIONS,
    EpisodeTrace,
    RankerConfig,
    decode_chain,
    init_ranker_params,
)
from .reasoner import (
    ReasonerConfig,
    entity_distribution,
    init_reasoner_params,
    reasoner_loss,
    top1_entity,
)

PLACEMENTS = ("second_step", "first_step", "both")


@dataclass
class TrainConfig:
    hops: int = 2
    direction: str = "tail_first"
    learning_rate: float = 1e-2
    episodes: int = 0
    baseline_decay: float = 0.9
    cooperative_bonus: float = 1.0
    ranker_epochs_per_reasoner: int = 1
    seed: int = 0
    grad_clip_norm: float = 5.0
    bonus_placement: str = "second_step"

    def validate(self) -> None:
        if self.hops not in (2, 3):
            raise ValueError(f"hops must be 2 or 3, got {self.hops}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.cooperative_bonus < 0:
            raise ValueError("cooperative bonus must be >= 0")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline decay must lie in [0, 1)")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.ranker_epochs_per_reasoner < 1:
            raise ValueError("alternation schedule needs >= 1 ranker epoch")
        if self.bonus_placement not in PLACEMENTS:
            raise ValueError(f"bonus placement must be one of {PLACEMENTS}")
        if self.grad_clip_norm <= 0:
            raise ValueError("gradient clip norm must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {"hops": self.hops, "direction": self.direction,
                "learning_rate": self.learning_rate, "episodes": self.episodes,
                "baseline_decay": self.baseline_decay,
                "cooperative_bonus": self.cooperative_bonus,
                "ranker_epochs_per_reasoner": self.ranker_epochs_per_reasoner,
                "seed": self.seed, "grad_clip_norm": self.grad_clip_norm,
                "bonus_placement": self.bonus_placement}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        allowed = set(TrainConfig().to_dict())
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        cfg = TrainConfig(**d)
        cfg.validate()
        return cfg


class EmaBaseline:
    """Per-step-index exponential moving average of observed rewards."""

    def __init__(self, decay: float, steps: int, values=None):
        self.decay = decay
        self.values = list(values) if values is not None else [0.0] * steps

    def value(self, t: int) -> float:
        return self.values[t]

    def update(self, step_means) -> None:
        for t, m in enumerate(step_means):
            self.values[t] = self.decay * self.values[t] + (1.0 - self.decay) * m

    def state(self) -> list:
        return list(self.values)


def reward_2hop(selection, P_H, P_T):
    """Independent memberships: (r_h, r_t) for a (p_h, p_t) id pair."""
    p_h, p_t = selection
    return (1.0 if p_h in P_H else 0.0, 1.0 if p_t in P_T else 0.0)


def reward_3hop(selection, C, P_H, P_T):
    """(r_h, r_m, r_t): set memberships at the ends, exact ordered path
    membership for the middle regardless of which entities realize it."""
    p_h, p_m, p_t = selection
    r_h = 1.0 if p_h in P_H else 0.0
    r_t = 1.0 if p_t in P_T else 0.0
    triple = (p_h, p_m, p_t)
    r_m = 1.0 if any(c.passage_ids == triple for c in C) else 0.0
    return (r_h, r_m, r_t)


def reward_cooperative(p_h, e_pred, P_H, base) -> float:
    """1 + base when the predicted entity is mentioned in an in-set pick,
    1 for an in-set pick alone, 0 otherwise."""
    if p_h.id not in P_H:
        return 0.0
    if e_pred is not None and e_pred in set(p_h.entity_ids()):
        return 1.0 + base
    return 1.0


def _shared_entities(a, b):
    return set(a.entity_ids()) & set(b.entity_ids())


def assign_rewards(trace: EpisodeTrace, C, P_H, P_T) -> None:
    """Fill in per-step rewards from the candidate structure (no bonus)."""
    if trace.hops == 2:
        r_h, r_t = reward_2hop((trace.step_by_role("head").chosen_id,
                                trace.step_by_role("tail").chosen_id), P_H, P_T)
        trace.step_by_role("head").reward = r_h
        trace.step_by_role("tail").reward = r_t
    else:
        r_h, r_m, r_t = reward_3hop((trace.step_by_role("head").chosen_id,
                                     trace.step_by_role("middle").chosen_id,
                                     trace.step_by_role("tail").chosen_id),
                                    C, P_H, P_T)
        trace.step_by_role("head").reward = r_h
        trace.step_by_role("middle").reward = r_m
        trace.step_by_role("tail").reward = r_t


def _global_grad_norm(ps: ParameterSet) -> float:
    total = 0.0
    for t in ps.tensors():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def _sgd_update(ps: ParameterSet, lr: float, clip_norm: float) -> float:
    norm = _global_grad_norm(ps)
    scale = 1.0 if norm <= clip_norm or norm == 0.0 else clip_norm / norm
    for t in ps.tensors():
        if t.grad is not None:
            t.data -= lr * scale * t.grad
    return norm


def policy_gradient_step(traces, ps: ParameterSet, cfg: TrainConfig,
                         baseline: EmaBaseline | None = None) -> dict:
    """One REINFORCE update from a batch of reward-annotated traces.

    The surrogate is -sum over steps of (reward - baseline) * logprob,
    averaged over the batch; the baseline reads its pre-update values and
    is refreshed from this batch's per-step mean rewards afterwards.
    """
    if not traces:
        raise ValueError("policy_gradient_step needs at least one trace")
    n_steps = len(traces[0].steps)
    terms = []
    loss_val = 0.0
    for trace in traces:
        for t, step in enumerate(trace.steps):
            if step.reward is None:
                raise ValueError(f"trace {trace.question_id!r} step {t} has no reward")
            adv = step.reward - (baseline.value(t) if baseline else 0.0)
            loss_val += -adv * float(step.logprob.data)
            if adv != 0.0:
                terms.append(mul(step.logprob, -adv))
    loss_val /= len(traces)

    ps.zero_grads()
    if terms:
        total = terms[0]
        for extra in terms[1:]:
            total = add(total, extra)
        backward(mul(total, 1.0 / len(traces)))
    grad_norm = _sgd_update(ps, cfg.learning_rate, cfg.grad_clip_norm)

    if baseline is not None:
        means = [float(np.mean([tr.steps[t].reward for tr in traces]))
                 for t in range(n_steps)]
        baseline.update(means)
    mean_reward = float(np.mean([sum(s.reward for s in tr.steps) for tr in traces]))
    return {"mean_reward": mean_reward, "loss": loss_val, "grad_norm": grad_norm}


def infer_vocab(corpus) -> int:
    top = 0
    for inst in corpus:
        if inst.question_tokens:
            top = max(top, max(inst.question_tokens))
        for p in inst.passages:
            if p.tokens:
                top = max(top, max(p.tokens))
    return top + 1


def _candidate_structure(corpus, hops):
    out = []
    for inst in corpus:
        C = extract_chains_2hop(inst) if hops == 2 else extract_chains_3hop(inst)
        P_H, P_T = head_tail_sets(C)
        out.append((C, P_H, P_T))
    return out


def _epoch_bounds(start: int, total: int, per_epoch: int):
    bounds = []
    s = start
    while s < total:
        e = min(s + per_epoch - (s % per_epoch), total)
        bounds.append((s, e))
        s = e
    return bounds


def _episode_rng(seed: int, salt: int, episode: int):
    return np.random.default_rng(np.random.SeedSequence((int(seed), salt, int(episode))))


def clone_params(ps: ParameterSet) -> ParameterSet:
    out = ParameterSet()
    for name, t in ps.items():
        out.add(name, t.data.copy())
    return out


@dataclass
class TrainResult:
    params: ParameterSet
    log: list = field(default_factory=list)
    reasoner_params: ParameterSet | None = None
    baseline: EmaBaseline | None = None


def _write_log(log_path, records) -> None:
    if log_path is None:
        return
    with open(log_path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def train_ranker(corpus, cfg: TrainConfig, model_cfg: RankerConfig | None = None,
                 params: ParameterSet | None = None, conditional: bool = True,
                 dev_eval=None, checkpoint_path=None, log_path=None,
                 start_episode: int = 0, baseline: EmaBaseline | None = None,
                 trace_hook=None) -> TrainResult:
    """REINFORCE training of the selection policy alone.

    Episodes cycle through the corpus in order; episode e always draws
    from the rng stream keyed (seed, e), so a run resumed from episode k
    replays the exact updates of an uninterrupted run. An epoch is one
    sweep worth of episodes.
    """
    cfg.validate()
    if not corpus:
        raise ValueError("empty corpus")
    if params is None:
        params = init_ranker_params(
            model_cfg or RankerConfig(vocab_size=infer_vocab(corpus)), cfg.seed)
    if baseline is None:
        baseline = EmaBaseline(cfg.baseline_decay, cfg.hops)
    structure = _candidate_structure(corpus, cfg.hops)
    n = len(corpus)
    records = []
    for (s, e) in _epoch_bounds(start_episode, cfg.episodes, n):
        epoch = s // n
        rewards, losses = [], []
        for ep in range(s, e):
            inst = corpus[ep % n]
            C, P_H, P_T = structure[ep % n]
            rng = _episode_rng(cfg.seed, 11, ep)
            _, trace = decode_chain(inst, cfg.direction, cfg.hops, "sample",
                                    params, rng, conditional=conditional)
            assign_rewards(trace, C, P_H, P_T)
            if trace_hook is not None:
                trace_hook("ranker", ep, trace)
            stats = policy_gradient_step([trace], params, cfg, baseline)
            rewards.append(stats["mean_reward"])
            losses.append(stats["loss"])
        rec = {"epoch": epoch, "phase": "ranker",
               "mean_reward": float(np.mean(rewards)),
               "loss": float(np.mean(losses)),
               "dev_accuracy": (None if dev_eval is None
                                else float(dev_eval(params, None)))}
        records.append(rec)
        if checkpoint_path is not None:
            params.save(checkpoint_path,
                        extra={"kind": "ranker", "episode": e,
                               "baseline": baseline.state(),
                               "conditional": conditional,
                               "train_config": cfg.to_dict()})
    _write_log(log_path, records)
    return TrainResult(params=params, log=records, baseline=baseline)


def train_independent(corpus, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Same policy objective with the query state frozen at the question."""
    return train_ranker(corpus, cfg, conditional=False, **kwargs)


def _entity_guess(inst, passage, reasoner_ps):
    if not passage.mentions:
        return None
    dist = entity_distribution(inst, passage, inst.question_tokens, reasoner_ps)
    return top1_entity(dist)


def _reasoner_examples_2hop(trace, inst):
    first, second = trace.steps
    if first.reward != 1.0 or second.reward != 1.0:
        return []
    p_first = inst.passage_by_id(first.chosen_id)
    p_second = inst.passage_by_id(second.chosen_id)
    positives = _shared_entities(p_first, p_second)
    if not positives or not p_first.mentions:
        return []
    return [(p_first, positives)]


def _reasoner_examples_3hop(trace, inst):
    head = trace.step_by_role("head")
    tail = trace.step_by_role("tail")
    middle = trace.step_by_role("middle")
    if middle.reward != 1.0:
        return []
    p_m = inst.passage_by_id(middle.chosen_id)
    out = []
    for step in (head, tail):
        if step.reward != 1.0:
            continue
        p = inst.passage_by_id(step.chosen_id)
        positives = _shared_entities(p, p_m)
        if positives and p.mentions:
            out.append((p, positives))
    return out


def reasoner_training_step(examples, inst, reasoner_ps, cfg: TrainConfig) -> float:
    """Supervised update: mean linking-entity loss over this episode's examples."""
    losses = []
    for passage, positives in examples:
        dist = entity_distribution(inst, passage, inst.question_tokens, reasoner_ps)
        losses.append(reasoner_loss(dist, positives))
    total = losses[0]
    for extra in losses[1:]:
        total = add(total, extra)
    loss = mul(total, 1.0 / len(losses))
    reasoner_ps.zero_grads()
    backward(loss)
    _sgd_update(reasoner_ps, cfg.learning_rate, cfg.grad_clip_norm)
    return float(loss.data)


def _apply_cooperative_rewards(trace, inst, P_H, P_T, reasoner_ps,
                               cfg: TrainConfig) -> None:
    """Swap in the entity-modulated reward after base rewards are set.

    Two hops: the entity is predicted from one step's passage and the
    bonus lands on the other step when that entity is mentioned in its
    pick. Three hops: each end predicts its own entity, and its bonus
    requires the entity to appear in the selected middle passage.
    """
    if trace.hops == 2:
        first, second = trace.steps
        preds = []
        sets = {"head": P_H, "tail": P_T}
        if cfg.bonus_placement in ("second_step", "both"):
            e_pred = _entity_guess(inst, inst.passage_by_id(first.chosen_id),
                                   reasoner_ps)
            second.reward = reward_cooperative(
                inst.passage_by_id(second.chosen_id), e_pred,
                sets[second.role], cfg.cooperative_bonus)
            preds.append(e_pred)
        if cfg.bonus_placement in ("first_step", "both"):
            e_pred = _entity_guess(inst, inst.passage_by_id(second.chosen_id),
                                   reasoner_ps)
            first.reward = reward_cooperative(
                inst.passage_by_id(first.chosen_id), e_pred,
                sets[first.role], cfg.cooperative_bonus)
            preds.append(e_pred)
        trace.entity_predictions = preds
        return

    head = trace.step_by_role("head")
    tail = trace.step_by_role("tail")
    p_m = inst.passage_by_id(trace.step_by_role("middle").chosen_id)
    m_entities = set(p_m.entity_ids())
    preds = []
    for step, base_set in ((head, P_H), (tail, P_T)):
        p = inst.passage_by_id(step.chosen_id)
        e_pred = _entity_guess(inst, p, reasoner_ps)
        preds.append(e_pred)
        if step.chosen_id not in base_set:
            step.reward = 0.0
        elif e_pred is not None and e_pred in m_entities:
            step.reward = 1.0 + cfg.cooperative_bonus
        else:
            step.reward = 1.0
    trace.entity_predictions = preds


def cooperative_phases(epochs: int, schedule: int):
    """Alternation pattern: one reasoner epoch, then ``schedule`` ranker epochs."""
    phases = []
    while len(phases) < epochs:
        phases.append("reasoner")
        phases.extend(["ranker"] * schedule)
    return phases[:epochs]


def train_cooperative(corpus, cfg: TrainConfig, warm_ranker: ParameterSet,
                      reasoner_cfg: ReasonerConfig | None = None,
                      reasoner_params: ParameterSet | None = None,
                      dev_eval=None, checkpoint_path=None, log_path=None,
                      trace_hook=None) -> TrainResult:
    """Alternating cooperative game on top of a warm-started ranker.

    cfg.episodes is the total across phases; epochs are corpus-sized
    slices assigned reasoner/ranker roles by the alternation schedule.
    Ranker-phase episodes draw from the same per-index rng streams as
    train_ranker, so a zero-bonus run reproduces plain training exactly.
    """
    cfg.validate()
    if not corpus:
        raise ValueError("empty corpus")
    ranker_ps = warm_ranker
    if reasoner_params is None:
        reasoner_params = init_reasoner_params(
            reasoner_cfg or ReasonerConfig(vocab_size=infer_vocab(corpus)),
            cfg.seed)
    structure = _candidate_structure(corpus, cfg.hops)
    n = len(corpus)
    baseline = EmaBaseline(cfg.baseline_decay, cfg.hops)
    bounds = _epoch_bounds(0, cfg.episodes, n)
    phases = cooperative_phases(len(bounds), cfg.ranker_epochs_per_reasoner)
    records = []
    ranker_episode = 0  # counts ranker-phase episodes only, for rng parity
    for (s, e), phase in zip(bounds, phases):
        epoch = s // n
        rewards, losses = [], []
        for ep in range(s, e):
            inst = corpus[ep % n]
            C, P_H, P_T = structure[ep % n]
            if phase == "reasoner":
                rng = _episode_rng(cfg.seed, 21, ep)
                _, trace = decode_chain(inst, cfg.direction, cfg.hops, "sample",
                                        ranker_ps, rng)
                assign_rewards(trace, C, P_H, P_T)
                rewards.append(sum(st.reward for st in trace.steps))
                examples = (_reasoner_examples_2hop(trace, inst) if cfg.hops == 2
                            else _reasoner_examples_3hop(trace, inst))
                if trace_hook is not None:
                    trace_hook("reasoner", ep, trace)
                if examples:
                    losses.append(reasoner_training_step(examples, inst,
                                                         reasoner_params, cfg))
            else:
                rng = _episode_rng(cfg.seed, 11, ranker_episode)
                _, trace = decode_chain(inst, cfg.direction, cfg.hops, "sample",
                                        ranker_ps, rng)
                assign_rewards(trace, C, P_H, P_T)
                _apply_cooperative_rewards(trace, inst, P_H, P_T,
                                           reasoner_params, cfg)
                if trace_hook is not None:
                    trace_hook("ranker", ep, trace)
                stats = policy_gradient_step([trace], ranker_ps, cfg, baseline)
                rewards.append(stats["mean_reward"])
                losses.append(stats["loss"])
                ranker_episode += 1
        rec = {"epoch": epoch, "phase": phase,
               "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
               "loss": float(np.mean(losses)) if losses else 0.0,
               "dev_accuracy": (None if dev_eval is None
                                else float(dev_eval(ranker_ps, reasoner_params)))}
        records.append(rec)
        if checkpoint_path is not None:
            ranker_ps.save(checkpoint_path,
                           extra={"kind": "cooperative", "episode": e,
                                  "baseline": baseline.state(),
                                  "train_config": cfg.to_dict(),
                                  "reasoner_file": str(checkpoint_path) + ".reasoner"})
            reasoner_params.save(str(checkpoint_path) + ".reasoner",
                                 extra={"kind": "reasoner", "episode": e})
    _write_log(log_path, records)
    return TrainResult(params=ranker_ps, log=records,
                       reasoner_params=reasoner_params, baseline=baseline)
