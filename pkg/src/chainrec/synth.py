"""Synthetic corpus generator with planted gold chains.

Every question is built from a templated pattern over a partitioned
vocabulary: the tail passage repeats the question's topic and relation
tokens and carries the answer, and the gold head repeats the topic and
query tokens and shares a bridge entity with the tail. The true bridge
always sits immediately after the answer token; any other bridge the tail
mentions lands in a trailing slot. Distractors come in graded difficulty,
each targeting a specific model capability:

- easy decoy heads: off-topic junk passages sharing a trailing bridge with
  the gold tail; they enter the candidate set, but their surface form also
  appears in unlinked filler passages that selection is punished for, so
  ranking them above the gold head never pays;
- wrong-answer tails (the hard decoys): a trio of passages that echo the
  tail template with a wrong answer token and share one trailing bridge
  with the gold tail, heading candidate chains that reach the answer
  through the wrong route. Step one must keep the tail template on top
  (the true tail is indistinguishable from the trio before the answer is
  known), while step two must rank the gold head above it; a per-passage
  scorer shares one ordering across both steps and has to compromise,
  whereas query-state conditioning re-ranks per step;
- crossed instances: the question carries two probe tokens, and whichever
  one the tail repeats, the gold head carries the other (the orientation
  flips per instance). Wrong-template heads echo the tail's probe token
  and link through a trailing bridge, and an unlinked twin of that wrong
  template is always present and punished. A policy that scores heads
  without reading the tail is stuck at the orientation coin; conditioning
  on the chosen tail reveals which question position it matched and lets
  the head template switch;
- entity-ambiguous instances: a mirror head surface-identical to the gold
  head carries a second bridge that the tail mentions in a trailing slot.
  No passage-level signal separates the two candidate chains; only a
  reader that has learned the bridge-after-answer placement breaks the
  tie, which is what the cooperative game trains;
- a second answer carrier (same template as the tail, no links), thinning
  tail-side signal for direction-ablation suites;
- an always-present unlinked noise passage echoing the tail template with
  an off-answer token, keeping answer-likeness from being a universally
  rewarded feature.

Token-mode answers (no answer entity) keep tails from interlinking through
the answer itself.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .corpus import (
    CandidateChain, GoldAnnotation, Mention, Passage, QuestionInstance,
)

__all__ = ["SynthConfig", "VocabLayout", "generate_synthetic"]


class ConfigError(ValueError):
    """The synthesis configuration is infeasible or out of range."""


@dataclass
class VocabLayout:
    """Disjoint token regions carved out of [0, vocab_size)."""
    topics: range
    relations: range
    query: range
    answers: range
    entities: range
    junk: range
    filler: range

    @staticmethod
    def for_size(vocab_size: int) -> "VocabLayout":
        if vocab_size < 60:
            raise ConfigError(f"vocab_size must be at least 60, got {vocab_size}")
        cuts = [0.08, 0.16, 0.24, 0.40, 0.65, 0.82, 1.0]
        b = [0] + [max(1, int(round(vocab_size * c))) for c in cuts]
        return VocabLayout(
            topics=range(b[0], b[1]),
            relations=range(b[1], b[2]),
            query=range(b[2], b[3]),
            answers=range(b[3], b[4]),
            entities=range(b[4], b[5]),
            junk=range(b[5], b[6]),
            filler=range(b[6], b[7]),
        )


@dataclass
class SynthConfig:
    """Knobs for the generator; defaults are echoed into reports.

    distractor_rate is the fraction of instances whose candidate set has
    more than one chain. Each such instance draws one decoy family:
    wrong-answer tails with probability hard_decoy_rate, a mirror head
    with probability ambiguous_link_rate, crossed heads with probability
    crossed_rate, easy decoys otherwise, so the |C|>1 count stays exactly
    at distractor_rate. second_tail_rate adds an unlinked answer carrier
    to any instance; it never enters the candidate set. The knobs after
    distractor_rate shape 2-hop instances only.
    """
    hops: int = 2
    questions: int = 1000
    pool_size: int = 6
    vocab_size: int = 120
    distractor_rate: float = 0.8
    easy_decoys: int = 1
    hard_decoy_rate: float = 0.5
    wrong_tails: int = 3
    crossed_rate: float = 0.0
    crossed_heads: int = 1
    ambiguous_link_rate: float = 0.0
    second_tail_rate: float = 0.0

    def validate(self) -> None:
        if self.hops not in (2, 3):
            raise ConfigError(f"hops must be 2 or 3, got {self.hops}")
        if self.questions < 0:
            raise ConfigError("questions must be non-negative")
        if not 1 <= self.easy_decoys <= 2:
            raise ConfigError("easy_decoys must be 1 or 2, got "
                              f"{self.easy_decoys}")
        if not 2 <= self.wrong_tails <= 5:
            raise ConfigError(f"wrong_tails must be in [2, 5], got "
                              f"{self.wrong_tails}")
        if not 1 <= self.crossed_heads <= 4:
            raise ConfigError(f"crossed_heads must be in [1, 4], got "
                              f"{self.crossed_heads}")
        for name in ("distractor_rate", "hard_decoy_rate", "crossed_rate",
                     "ambiguous_link_rate", "second_tail_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if (self.hard_decoy_rate + self.ambiguous_link_rate
                + self.crossed_rate > 1.0):
            raise ConfigError("hard_decoy_rate + ambiguous_link_rate + "
                              "crossed_rate must not exceed 1")
        lay = VocabLayout.for_size(self.vocab_size)
        # largest pool any instance can demand: gold pair + noise + the
        # widest decoy family + optional extra carrier
        if self.hops == 2:
            family = 0
            if self.distractor_rate > 0:
                family = self.easy_decoys
                if self.hard_decoy_rate > 0:
                    family = max(family, self.wrong_tails)
                if self.ambiguous_link_rate > 0:
                    family = max(family, 1)
                if self.crossed_rate > 0:
                    # crossed heads plus their punished template twin
                    family = max(family, self.crossed_heads + 1)
            need = 3 + family + int(self.second_tail_rate > 0)
            ents_need = 12 + self.pool_size
        else:
            need = 3 + 1 + 1  # golds, decoy middle, noise
            ents_need = 8
        if self.pool_size < need:
            raise ConfigError(
                f"pool_size {self.pool_size} cannot hold the configured "
                f"passage roles (needs at least {need})")
        if len(lay.answers) < 2 + self.wrong_tails:
            raise ConfigError(
                f"vocab_size {self.vocab_size} leaves too few answer tokens")
        if len(lay.entities) < ents_need:
            raise ConfigError(
                f"vocab_size {self.vocab_size} leaves only {len(lay.entities)} entity "
                f"tokens, too few for pool_size {self.pool_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        known = {f for f in SynthConfig.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown synth config fields: {sorted(bad)}")
        cfg = SynthConfig(**d)
        cfg.validate()
        return cfg


def _ent(token: int) -> str:
    return f"E{token:03d}"


def _mention_all(tokens: list[int], entity_tokens: dict[int, str]) -> list[Mention]:
    """One single-token mention per occurrence of each registered entity token."""
    ms = []
    for i, t in enumerate(tokens):
        if t in entity_tokens:
            ms.append(Mention(entity_tokens[t], i, i + 1))
    return ms


def _build_2hop(i: int, cfg: SynthConfig, lay: VocabLayout,
                rng: np.random.Generator) -> tuple[QuestionInstance, GoldAnnotation]:
    topic = int(rng.choice(lay.topics))
    off_topics = [t for t in lay.topics if t != topic]
    rel = int(rng.choice(lay.relations))
    qtok = int(rng.choice(lay.query))
    a0, a_noise = (int(a) for a in rng.choice(lay.answers, size=2, replace=False))

    n_ents = 12 + cfg.pool_size
    ent_tokens = [int(t) for t in rng.choice(lay.entities, size=n_ents,
                                             replace=False)]
    ents = iter(ent_tokens)

    reg: dict[int, str] = {}

    def fresh() -> int:
        t = next(ents)
        reg[t] = _ent(t)
        return t

    def junk() -> int:
        return int(rng.choice(lay.junk))

    def off() -> int:
        return int(rng.choice(off_topics))

    b_gold = fresh()
    decoyed = rng.random() < cfg.distractor_rate
    kind = "plain"
    if decoyed:
        r = rng.random()
        if r < cfg.hard_decoy_rate:
            kind = "hard"
        elif r < cfg.hard_decoy_rate + cfg.ambiguous_link_rate:
            kind = "mirror"
        elif r < (cfg.hard_decoy_rate + cfg.ambiguous_link_rate
                  + cfg.crossed_rate):
            kind = "crossed"
        else:
            kind = "easy"
    # which probe token the tail repeats; the gold head carries the other.
    # Only crossed instances flip, so every other kind keeps the relation
    # on the tail side and the query token on the head side.
    tmark, gmark = rel, qtok
    if kind == "crossed" and rng.random() < 0.5:
        tmark, gmark = qtok, rel
    with_second_tail = rng.random() < cfg.second_tail_rate

    # trailing bridges the tail will mention besides the gold one
    extra_bridges = []
    if kind == "easy":
        extra_bridges = [fresh() for _ in range(cfg.easy_decoys)]
    elif kind in ("hard", "mirror"):
        extra_bridges = [fresh()]
    elif kind == "crossed":
        extra_bridges = [fresh() for _ in range(min(cfg.crossed_heads, 2))]
    trailing = list(extra_bridges)
    rng.shuffle(trailing)
    while len(trailing) < 2:
        trailing.append(fresh())
    # fixed tail shape: the gold bridge right after the answer, everything
    # else in the two trailing slots
    tail_tokens = [topic, tmark, a0, b_gold] + trailing[:2]
    head_tokens = [topic, gmark, b_gold]
    if kind == "crossed":
        # keep the gold head the same length as the crossed heads so
        # nothing but the probe token tells the templates apart
        head_tokens = head_tokens + [junk()]

    roles: list[tuple[list[int], str]] = [(tail_tokens, "tail"),
                                          (head_tokens, "head")]
    if kind == "easy":
        for b in extra_bridges:
            roles.append(([off(), junk(), b, junk()], "easy"))
    elif kind == "hard":
        b_d = extra_bridges[0]
        wrongs = [int(a) for a in rng.choice(
            [a for a in lay.answers if a not in (a0, a_noise)],
            size=cfg.wrong_tails, replace=False)]
        for a_w in wrongs:
            slots = [fresh(), fresh()]
            slots.insert(int(rng.integers(0, 3)), b_d)
            roles.append(([topic, rel, a_w] + slots, "wrong_tail"))
    elif kind == "mirror":
        roles.append(([topic, qtok, extra_bridges[0]], "mirror"))
    elif kind == "crossed":
        for j in range(cfg.crossed_heads):
            b = extra_bridges[j % len(extra_bridges)]
            roles.append(([topic, tmark, b, junk()], "crossed_head"))
        roles.append(([topic, tmark, fresh(), junk()], "head_noise"))
    if with_second_tail:
        roles.append(([topic, tmark, a0, fresh(), fresh(), fresh()], "carrier"))
    roles.append(([topic, tmark, a_noise, fresh(), fresh(), fresh()], "noise"))
    while len(roles) < cfg.pool_size:
        roles.append(([off(), junk(), fresh(), junk()], "filler"))

    order = rng.permutation(len(roles))
    qid = f"q{i:05d}"
    passages = []
    pid_of = {}
    for slot, role_idx in enumerate(order):
        tokens, name = roles[int(role_idx)]
        pid_of.setdefault(name, f"p{slot}")
        passages.append(Passage(f"p{slot}", list(tokens), _mention_all(tokens, reg)))

    inst = QuestionInstance(
        id=qid,
        question_tokens=[topic, rel, qtok],
        answer_entity=None,
        answer_tokens=[a0],
        query_entities=[],
        passages=passages,
    )
    gold = CandidateChain((pid_of["head"], pid_of["tail"]), (reg[b_gold],))
    return inst, GoldAnnotation(qid, [gold], ambiguous=False)


def _build_3hop(i: int, cfg: SynthConfig, lay: VocabLayout,
                rng: np.random.Generator) -> tuple[QuestionInstance, GoldAnnotation]:
    topic = int(rng.choice(lay.topics))
    off_topics = [t for t in lay.topics if t != topic]
    rel = int(rng.choice(lay.relations))
    qtok = int(rng.choice(lay.query))
    a0, a_noise = (int(a) for a in rng.choice(lay.answers, size=2, replace=False))
    ent_tokens = [int(t) for t in rng.choice(lay.entities, size=8, replace=False)]
    ents = iter(ent_tokens)
    b1, b2 = next(ents), next(ents)
    query_entity = f"Q{qtok:03d}"

    reg = {b1: _ent(b1), b2: _ent(b2)}

    def fresh() -> int:
        t = next(ents)
        reg[t] = _ent(t)
        return t

    decoyed = rng.random() < cfg.distractor_rate

    head_tokens = [topic, qtok, b1]
    mid_tokens = [topic, b1, b2]
    tail_tokens = [topic, rel, a0, b2]
    roles = [head_tokens, mid_tokens, tail_tokens]
    head_role, mid_role, tail_role = 0, 1, 2
    if decoyed:
        roles.append([int(rng.choice(off_topics)), int(rng.choice(lay.junk)), b1, b2])
    roles.append([int(rng.choice(off_topics)), a_noise, fresh()])
    while len(roles) < cfg.pool_size:
        roles.append([int(rng.choice(off_topics)), int(rng.choice(lay.junk)), fresh()])

    order = rng.permutation(len(roles))
    qid = f"q{i:05d}"
    passages = []
    pos_of_role = {}
    for slot, role_idx in enumerate(order):
        pos_of_role[int(role_idx)] = slot
        tokens = roles[int(role_idx)]
        mentions = _mention_all(tokens, reg)
        if int(role_idx) == head_role:
            qpos = tokens.index(qtok)
            mentions.append(Mention(query_entity, qpos, qpos + 1))
        passages.append(Passage(f"p{slot}", list(tokens), mentions))

    inst = QuestionInstance(
        id=qid,
        question_tokens=[topic, rel, qtok],
        answer_entity=None,
        answer_tokens=[a0],
        query_entities=[query_entity],
        passages=passages,
    )
    gold = CandidateChain(
        (f"p{pos_of_role[head_role]}", f"p{pos_of_role[mid_role]}",
         f"p{pos_of_role[tail_role]}"),
        (reg[b1], reg[b2]))
    return inst, GoldAnnotation(qid, [gold], ambiguous=False)


def generate_synthetic(cfg: SynthConfig, seed: int) -> tuple[list[QuestionInstance],
                                                             list[GoldAnnotation]]:
    """Generate a corpus with planted gold chains; bit-identical under one seed."""
    cfg.validate()
    lay = VocabLayout.for_size(cfg.vocab_size)
    instances, annotations = [], []
    build = _build_2hop if cfg.hops == 2 else _build_3hop
    for i in range(cfg.questions):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        inst, gold = build(i, cfg, lay, rng)
        instances.append(inst)
        annotations.append(gold)
    return instances, annotations
