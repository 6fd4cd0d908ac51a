"""Data model, JSONL IO, and candidate-chain extraction.

A corpus is a sequence of question instances, each carrying a passage pool.
Candidate chains are the distant-supervision structures: ordered passages
joined by shared entities, ending in a passage that contains the answer.

JSONL formats (one object per line):

corpus:      {"id", "question", "answer_entity", "answer_tokens",
              "query_entities", "passages": [{"id", "tokens",
              "mentions": [{"entity", "start", "end"}...]}...]}
gold:        {"id", "ambiguous", "gold_chains": [{"passages", "links"}...]}
predictions: {"id", "chain": {"passages", "links"}, "logprob"}

Exactly one of answer_entity / answer_tokens is non-null.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

__all__ = [
    "Mention",
    "Passage",
    "QuestionInstance",
    "CandidateChain",
    "GoldAnnotation",
    "Prediction",
    "CorpusFormatError",
    "contains_answer",
    "extract_chains_2hop",
    "extract_chains_3hop",
    "head_tail_sets",
    "load_corpus",
    "save_corpus",
    "load_gold",
    "save_gold",
    "load_predictions",
    "save_predictions",
]


class CorpusFormatError(ValueError):
    """A JSONL file violates the corpus/gold/prediction schema.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Mention:
    entity: str
    start: int
    end: int  # exclusive


@dataclass
class Passage:
    id: str
    tokens: list[int]
    mentions: list[Mention] = field(default_factory=list)

    def entity_ids(self) -> set[str]:
        return {m.entity for m in self.mentions}

    def validate(self) -> None:
        for m in self.mentions:
            if not (0 <= m.start < m.end <= len(self.tokens)):
                raise ValueError(
                    f"passage {self.id!r}: mention {m.entity!r} span "
                    f"[{m.start}, {m.end}) outside {len(self.tokens)} tokens")


@dataclass
class QuestionInstance:
    id: str
    question_tokens: list[int]
    answer_entity: str | None
    answer_tokens: list[int] | None
    query_entities: list[str]
    passages: list[Passage]

    def __post_init__(self):
        if (self.answer_entity is None) == (self.answer_tokens is None):
            raise ValueError(
                f"instance {self.id!r}: exactly one of answer_entity/answer_tokens "
                "must be set")
        if not self.passages:
            raise ValueError(f"instance {self.id!r}: empty passage pool")
        seen = set()
        for p in self.passages:
            if p.id in seen:
                raise ValueError(f"instance {self.id!r}: duplicate passage id {p.id!r}")
            seen.add(p.id)
            p.validate()

    @property
    def degenerate(self) -> bool:
        """True when some query entity is mentioned in no passage."""
        mentioned = set()
        for p in self.passages:
            mentioned |= p.entity_ids()
        return any(q not in mentioned for q in self.query_entities)

    def passage_by_id(self, pid: str) -> Passage:
        for p in self.passages:
            if p.id == pid:
                return p
        raise KeyError(f"instance {self.id!r}: no passage {pid!r}")


@dataclass(frozen=True)
class CandidateChain:
    """Ordered passages joined by linking entities; ends at an answer passage."""
    passage_ids: tuple[str, ...]
    links: tuple[str, ...]

    def __post_init__(self):
        if len(self.passage_ids) not in (2, 3):
            raise ValueError(f"chain length must be 2 or 3, got {len(self.passage_ids)}")
        if len(self.links) != len(self.passage_ids) - 1:
            raise ValueError(
                f"chain with {len(self.passage_ids)} passages needs "
                f"{len(self.passage_ids) - 1} links, got {len(self.links)}")
        if len(set(self.passage_ids)) != len(self.passage_ids):
            raise ValueError(f"repeated passage in chain: {self.passage_ids}")

    def sort_key(self):
        # interleave ids and links: (p0, e0, p1, e1, p2)
        key = []
        for i, pid in enumerate(self.passage_ids):
            key.append(pid)
            if i < len(self.links):
                key.append(self.links[i])
        return tuple(key)

    def validate_against(self, inst: QuestionInstance) -> None:
        for i, link in enumerate(self.links):
            a = inst.passage_by_id(self.passage_ids[i])
            b = inst.passage_by_id(self.passage_ids[i + 1])
            if link not in a.entity_ids() or link not in b.entity_ids():
                raise ValueError(
                    f"link {link!r} not shared by {a.id!r} and {b.id!r}")
        tail = inst.passage_by_id(self.passage_ids[-1])
        if not contains_answer(tail, inst):
            raise ValueError(f"tail {tail.id!r} does not contain the answer")


@dataclass
class GoldAnnotation:
    question_id: str
    gold_chains: list[CandidateChain]
    ambiguous: bool = False


@dataclass
class Prediction:
    question_id: str
    passage_ids: tuple[str, ...]
    links: tuple[str, ...] | None
    logprob: float


def _subsequence(needle: Sequence[int], hay: Sequence[int]) -> bool:
    n = len(needle)
    if n == 0 or n > len(hay):
        return False
    return any(tuple(hay[i:i + n]) == tuple(needle) for i in range(len(hay) - n + 1))


def contains_answer(p: Passage, inst: QuestionInstance) -> bool:
    """True iff the passage carries the instance's answer.

    Entity-mode answers match a mention's entity id; token-mode answers match
    a contiguous token subsequence.
    """
    if inst.answer_entity is not None:
        return inst.answer_entity in p.entity_ids()
    return _subsequence(inst.answer_tokens, p.tokens)


def extract_chains_2hop(inst: QuestionInstance) -> list[CandidateChain]:
    """All (head, link, tail) candidates: tail contains the answer, the link
    entity is mentioned in both, head differs from tail.

    Returned in deterministic (head id, link, tail id) order.
    """
    tails = [p for p in inst.passages if contains_answer(p, inst)]
    out = []
    for pt in tails:
        tail_ents = pt.entity_ids()
        for ph in inst.passages:
            if ph.id == pt.id:
                continue
            for e in ph.entity_ids() & tail_ents:
                out.append(CandidateChain((ph.id, pt.id), (e,)))
    out.sort(key=CandidateChain.sort_key)
    return out


def extract_chains_3hop(inst: QuestionInstance) -> list[CandidateChain]:
    """All (head, e1, middle, e2, tail) candidates: head mentions a query
    entity, tail contains the answer, passages pairwise distinct, each link
    shared by its adjacent pair. Deterministic interleaved-id order.
    """
    query = set(inst.query_entities)
    heads = [p for p in inst.passages if p.entity_ids() & query]
    tails = [p for p in inst.passages if contains_answer(p, inst)]
    out = []
    for ph in heads:
        h_ents = ph.entity_ids()
        for pt in tails:
            if pt.id == ph.id:
                continue
            t_ents = pt.entity_ids()
            for pm in inst.passages:
                if pm.id in (ph.id, pt.id):
                    continue
                m_ents = pm.entity_ids()
                for e1 in h_ents & m_ents:
                    for e2 in m_ents & t_ents:
                        out.append(CandidateChain((ph.id, pm.id, pt.id), (e1, e2)))
    out.sort(key=CandidateChain.sort_key)
    return out


def head_tail_sets(chains: Iterable[CandidateChain]) -> tuple[set[str], set[str]]:
    """Project candidate chains onto their first (head) and last (tail) ids."""
    heads, tails = set(), set()
    for c in chains:
        heads.add(c.passage_ids[0])
        tails.add(c.passage_ids[-1])
    return heads, tails


# ---------------------------------------------------------------------------
# JSONL IO


def _require(cond: bool, line: int, msg: str) -> None:
    if not cond:
        raise CorpusFormatError(line, msg)


def _is_int_list(x) -> bool:
    return isinstance(x, list) and all(isinstance(t, int) and not isinstance(t, bool) for t in x)


def _iter_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(lineno, f"malformed JSON: {e.msg}")
            yield lineno, obj


def _parse_passage(obj, lineno: int) -> Passage:
    _require(isinstance(obj, dict), lineno, "passage must be an object")
    _require(isinstance(obj.get("id"), str), lineno, "passage id must be a string")
    pid = obj["id"]
    _require(_is_int_list(obj.get("tokens")), lineno,
             f"passage {pid!r}: tokens must be a list of integers")
    mentions = []
    for m in obj.get("mentions", []):
        _require(isinstance(m, dict) and isinstance(m.get("entity"), str)
                 and isinstance(m.get("start"), int) and isinstance(m.get("end"), int),
                 lineno, f"passage {pid!r}: malformed mention {m!r}")
        if not (0 <= m["start"] < m["end"] <= len(obj["tokens"])):
            raise CorpusFormatError(
                lineno, f"passage {pid!r}: mention {m['entity']!r} span "
                        f"[{m['start']}, {m['end']}) outside {len(obj['tokens'])} tokens")
        mentions.append(Mention(m["entity"], m["start"], m["end"]))
    return Passage(pid, list(obj["tokens"]), mentions)


def load_corpus(path) -> list[QuestionInstance]:
    """Read and validate corpus JSONL; failures cite the offending line."""
    out = []
    for lineno, obj in _iter_jsonl(path):
        _require(isinstance(obj, dict), lineno, "record must be an object")
        _require(isinstance(obj.get("id"), str), lineno, "id must be a string")
        qid = obj["id"]
        _require(_is_int_list(obj.get("question")), lineno,
                 f"{qid!r}: question must be a list of integers")
        ans_e = obj.get("answer_entity")
        ans_t = obj.get("answer_tokens")
        _require(ans_e is None or isinstance(ans_e, str), lineno,
                 f"{qid!r}: answer_entity must be a string or null")
        _require(ans_t is None or _is_int_list(ans_t), lineno,
                 f"{qid!r}: answer_tokens must be an integer list or null")
        _require((ans_e is None) != (ans_t is None), lineno,
                 f"{qid!r}: exactly one of answer_entity/answer_tokens must be non-null")
        qents = obj.get("query_entities", [])
        _require(isinstance(qents, list) and all(isinstance(e, str) for e in qents),
                 lineno, f"{qid!r}: query_entities must be a list of strings")
        raw_passages = obj.get("passages")
        _require(isinstance(raw_passages, list) and raw_passages, lineno,
                 f"{qid!r}: passages must be a non-empty list")
        passages = [_parse_passage(p, lineno) for p in raw_passages]
        ids = [p.id for p in passages]
        for pid in ids:
            if ids.count(pid) > 1:
                raise CorpusFormatError(lineno, f"{qid!r}: duplicate passage id {pid!r}")
        out.append(QuestionInstance(qid, list(obj["question"]), ans_e,
                                    None if ans_t is None else list(ans_t),
                                    list(qents), passages))
    return out


def save_corpus(instances: Sequence[QuestionInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            obj = {
                "id": inst.id,
                "question": inst.question_tokens,
                "answer_entity": inst.answer_entity,
                "answer_tokens": inst.answer_tokens,
                "query_entities": inst.query_entities,
                "passages": [
                    {"id": p.id, "tokens": p.tokens,
                     "mentions": [{"entity": m.entity, "start": m.start, "end": m.end}
                                  for m in p.mentions]}
                    for p in inst.passages
                ],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def _parse_chain(obj, lineno: int, what: str) -> CandidateChain:
    _require(isinstance(obj, dict), lineno, f"{what} must be an object")
    ps = obj.get("passages")
    links = obj.get("links")
    _require(isinstance(ps, list) and all(isinstance(x, str) for x in ps),
             lineno, f"{what}: passages must be a list of strings")
    _require(isinstance(links, list) and all(isinstance(x, str) for x in links),
             lineno, f"{what}: links must be a list of strings")
    try:
        return CandidateChain(tuple(ps), tuple(links))
    except ValueError as e:
        raise CorpusFormatError(lineno, f"{what}: {e}")


def load_gold(path) -> list[GoldAnnotation]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        _require(isinstance(obj, dict) and isinstance(obj.get("id"), str),
                 lineno, "gold record needs a string id")
        _require(isinstance(obj.get("ambiguous"), bool), lineno,
                 f"{obj.get('id')!r}: ambiguous must be a boolean")
        chains = obj.get("gold_chains")
        _require(isinstance(chains, list), lineno,
                 f"{obj['id']!r}: gold_chains must be a list")
        out.append(GoldAnnotation(
            obj["id"],
            [_parse_chain(c, lineno, "gold chain") for c in chains],
            obj["ambiguous"]))
    return out


def save_gold(annotations: Sequence[GoldAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in annotations:
            obj = {"id": g.question_id, "ambiguous": g.ambiguous,
                   "gold_chains": [{"passages": list(c.passage_ids),
                                    "links": list(c.links)} for c in g.gold_chains]}
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def load_predictions(path) -> list[Prediction]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        _require(isinstance(obj, dict) and isinstance(obj.get("id"), str),
                 lineno, "prediction record needs a string id")
        chain = obj.get("chain")
        _require(isinstance(chain, dict), lineno,
                 f"{obj['id']!r}: chain must be an object")
        ps = chain.get("passages")
        _require(isinstance(ps, list) and all(isinstance(x, str) for x in ps),
                 lineno, f"{obj['id']!r}: chain.passages must be a list of strings")
        links = chain.get("links")
        if links is not None:
            _require(isinstance(links, list) and all(isinstance(x, str) for x in links),
                     lineno, f"{obj['id']!r}: chain.links must be a list of strings or null")
        lp = obj.get("logprob")
        _require(isinstance(lp, (int, float)) and not isinstance(lp, bool),
                 lineno, f"{obj['id']!r}: logprob must be a number")
        out.append(Prediction(obj["id"], tuple(ps),
                              None if links is None else tuple(links), float(lp)))
    return out


def save_predictions(preds: Sequence[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            obj = {"id": p.question_id,
                   "chain": {"passages": list(p.passage_ids),
                             "links": None if p.links is None else list(p.links)},
                   "logprob": p.logprob}
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
