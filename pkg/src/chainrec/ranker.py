"""Passage ranking and sequential chain decoding.

The ranker scores each passage against the current query state with a
matching network (token-level affinities, attention-weighted question
summaries, a GRU over the fused features, max-pooling, linear head) and
selects passages step by step. After each selection the query state is
updated by projecting the concatenation of the previous query state and
the selected passage's matching vector back into query space, so later
selections are conditioned on earlier ones.

Two-hop decoding picks two passages with the second step masking the
first; direction decides whether the first pick is the head or the tail.
Three-hop decoding picks head and tail independently from the initial
query state and then the middle passage conditioned on both.

All parameters live in a flat :class:`~chainrec.layers.ParameterSet`; the
encoder geometry is recovered from parameter shapes so loaded checkpoints
are self-describing.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Tensor,
    concat,
    log,
    matmul,
    max_pool_over_time,
    mul,
    softmax,
    stack_rows,
    sub,
    take_rows,
    transpose,
    tsum,
)
from .corpus import CandidateChain, Passage, QuestionInstance
from .layers import (
    EncoderConfig,
    ParameterSet,
    _gru_direction,
    build_embedding,
    build_gru,
    build_linear,
    embed,
    ffn,
    gru_encode,
    linear,
)

DIRECTIONS = ("head_first", "tail_first")


class NoCandidateError(ValueError):
    """Raised when a selection step has no eligible passage left."""


@dataclass(frozen=True)
class RankerConfig:
    vocab_size: int
    embed_dim: int = 12
    hidden_dim: int = 8
    num_layers: int = 1
    bidirectional: bool = True
    match_hidden: int = 10

    @property
    def enc_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.vocab_size, self.embed_dim, self.hidden_dim,
                             self.num_layers, self.bidirectional)

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "embed_dim": self.embed_dim,
                "hidden_dim": self.hidden_dim, "num_layers": self.num_layers,
                "bidirectional": self.bidirectional,
                "match_hidden": self.match_hidden}

    @staticmethod
    def from_dict(d: dict) -> "RankerConfig":
        allowed = {"vocab_size", "embed_dim", "hidden_dim", "num_layers",
                   "bidirectional", "match_hidden"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown ranker config fields: {sorted(unknown)}")
        return RankerConfig(**d)


@dataclass(frozen=True)
class MatchResult:
    """Pooled matching state for one (query state, passage) pair plus its score."""
    matching_state: Tensor
    score: Tensor


@dataclass(frozen=True)
class RankerState:
    """Selection state after ``t`` completed steps.

    ``query_state`` starts as the encoded question and is re-projected
    after every selection; ``selected`` and ``step_logprobs`` grow one
    entry per step.
    """
    t: int
    query_state: Tensor
    selected: tuple = ()
    step_logprobs: tuple = ()


@dataclass
class StepRecord:
    """One selection step as seen by the trainer."""
    role: str                 # head | tail | middle
    probs: np.ndarray         # distribution over the pool, masked entries 0
    chosen_index: int
    chosen_id: str
    logprob: Tensor           # scalar, graph-bearing
    reward: float | None = None


@dataclass
class EpisodeTrace:
    question_id: str
    direction: str
    hops: int
    steps: list = field(default_factory=list)
    entity_predictions: list | None = None

    @property
    def selected_ids(self) -> tuple:
        return tuple(s.chosen_id for s in self.steps)

    def step_by_role(self, role: str) -> StepRecord:
        for s in self.steps:
            if s.role == role:
                return s
        raise KeyError(role)


def init_ranker_params(cfg: RankerConfig, seed: int) -> ParameterSet:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 7001)))
    ps = ParameterSet()
    build_embedding(ps, "emb", cfg.vocab_size, cfg.embed_dim, rng)
    build_gru(ps, "enc", cfg.embed_dim, cfg.hidden_dim, cfg.num_layers,
              cfg.bidirectional, rng)
    d = cfg.enc_dim
    build_gru(ps, "match", 4 * d, cfg.match_hidden, 1, False, rng)
    build_linear(ps, "score", cfg.match_hidden, 1, rng)
    build_linear(ps, "ffn", d + cfg.match_hidden, d, rng)
    return ps


def config_from_params(ps: ParameterSet) -> RankerConfig:
    """Recover the architecture from parameter shapes."""
    vocab, embed_dim = ps["emb"].data.shape
    hidden = ps["enc.l0.f.bz"].data.shape[0]
    bidirectional = "enc.l0.b.Wz" in ps
    layers = 0
    while f"enc.l{layers}.f.Wz" in ps:
        layers += 1
    match_hidden = ps["match.l0.f.bz"].data.shape[0]
    return RankerConfig(vocab, embed_dim, hidden, layers, bidirectional,
                        match_hidden)


def encode_question(tokens, ps: ParameterSet) -> Tensor:
    cfg = config_from_params(ps)
    return gru_encode(embed(tokens, ps, "emb"), cfg.encoder, ps, "enc")


def encode_passage(passage: Passage, ps: ParameterSet) -> Tensor:
    cfg = config_from_params(ps)
    return gru_encode(embed(passage.tokens, ps, "emb"), cfg.encoder, ps, "enc")


def match_score(Q: Tensor, H: Tensor, ps: ParameterSet) -> MatchResult:
    """Score one passage encoding against the query state.

    Token affinities e[j,k] = q_j . h_k are softmax-normalized over the
    passage positions k; the attention summary feeds the 4-way fused
    feature [q, q~, q - q~, q * q~], a forward GRU runs over the question
    positions, and the max-pooled state goes through a linear score head.
    """
    if Q.data.ndim != 2 or Q.data.shape[0] < 1:
        raise ShapeMismatchError(f"match_score expects a non-empty (N, d) query, got {Q.shape}")
    if H.data.ndim != 2 or H.data.shape[0] < 1:
        raise ShapeMismatchError(f"match_score expects a non-empty (M, d) passage, got {H.shape}")
    e = matmul(Q, transpose(H))
    attn = softmax(e)
    q_t = matmul(attn, H)
    feats = concat([Q, q_t, sub(Q, q_t), mul(Q, q_t)])
    hidden = ps["match.l0.f.bz"].data.shape[0]
    outs = _gru_direction(feats, ps, "match.l0.f", hidden, reverse=False)
    pooled = max_pool_over_time(stack_rows(outs))
    score = tsum(linear(pooled, ps, "score"))
    return MatchResult(matching_state=pooled, score=score)


def _score_pool(Q: Tensor, encs, mask, ps: ParameterSet):
    """Match every unmasked passage; masked slots get inert zero scores."""
    if not any(mask):
        raise NoCandidateError("no unmasked passage to select from")
    scores = []
    matches = []
    for enc, keep in zip(encs, mask):
        if keep:
            mr = match_score(Q, enc, ps)
            matches.append(mr)
            scores.append(mr.score.reshape(1))
        else:
            matches.append(None)
            scores.append(Tensor(np.zeros(1)))
    return concat(scores), matches


def select_distribution(state: RankerState, pool, mask, ps: ParameterSet) -> Tensor:
    """Distribution over the pool for the next pick; masked entries are exactly 0."""
    vec, _ = _score_pool(state.query_state, pool, mask, ps)
    return softmax(vec, mask)


def advance(state: RankerState, chosen, m_tilde: Tensor, ps: ParameterSet,
            logprob: Tensor) -> RankerState:
    """Fold a selection into the state: re-project the query, append the pick."""
    Q = state.query_state
    n = Q.data.shape[0]
    m_rep = take_rows(m_tilde.reshape(1, -1), [0] * n)
    new_q = ffn(concat([Q, m_rep]), ps, "ffn")
    return RankerState(t=state.t + 1, query_state=new_q,
                       selected=state.selected + (chosen,),
                       step_logprobs=state.step_logprobs + (logprob,))


def _choose(dist: Tensor, mode: str, rng) -> int:
    if mode == "greedy":
        return int(np.argmax(dist.data))  # first max wins ties: lowest index
    if mode == "sample":
        return int(rng.choice(dist.data.shape[0], p=dist.data / dist.data.sum()))
    raise ValueError(f"unknown decode mode {mode!r}")


def _step(state, encs, pids, mask, mode, rng, ps, role, trace, conditional,
          reuse_vec=None):
    if reuse_vec is not None:
        vec, matches = reuse_vec
    else:
        vec, matches = _score_pool(state.query_state, encs, mask, ps)
    dist = softmax(vec, mask)
    idx = _choose(dist, mode, rng)
    lp = tsum(log(dist.take([idx])))
    trace.steps.append(StepRecord(role=role, probs=dist.data.copy(),
                                  chosen_index=idx, chosen_id=pids[idx],
                                  logprob=lp))
    if conditional:
        state = advance(state, pids[idx], matches[idx].matching_state, ps, lp)
    else:
        state = RankerState(t=state.t + 1, query_state=state.query_state,
                            selected=state.selected + (pids[idx],),
                            step_logprobs=state.step_logprobs + (lp,))
    return state, idx, (vec, matches)


def _link_or_none(a: Passage, b: Passage):
    shared = set(a.entity_ids()) & set(b.entity_ids())
    return min(shared) if shared else None


def _chain_2hop(inst, head_id, tail_id):
    link = _link_or_none(inst.passage_by_id(head_id), inst.passage_by_id(tail_id))
    if link is None:
        return None
    return CandidateChain((head_id, tail_id), (link,))


def _chain_3hop(inst, head_id, mid_id, tail_id):
    if len({head_id, mid_id, tail_id}) != 3:
        return None
    e1 = _link_or_none(inst.passage_by_id(head_id), inst.passage_by_id(mid_id))
    e2 = _link_or_none(inst.passage_by_id(mid_id), inst.passage_by_id(tail_id))
    if e1 is None or e2 is None:
        return None
    return CandidateChain((head_id, mid_id, tail_id), (e1, e2))


def decode_chain(inst: QuestionInstance, direction: str, hops: int, mode: str,
                 ps: ParameterSet, rng, conditional: bool = True):
    """Roll out one selection episode over the instance's full passage pool.

    Returns ``(chain, trace)``. The chain is the selections arranged in
    head-to-tail order with each link set to the alphabetically first
    entity shared by the adjacent pair, or None when some pair shares no
    entity (the trace still records every step). With ``conditional``
    False the query state is never advanced, so later steps reuse the
    initial scores under a shrinking mask.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if hops not in (2, 3):
        raise ValueError(f"hops must be 2 or 3, got {hops}")
    if not inst.passages:
        raise NoCandidateError("instance has an empty passage pool")

    q0 = encode_question(inst.question_tokens, ps)
    encs = [encode_passage(p, ps) for p in inst.passages]
    pids = [p.id for p in inst.passages]
    k = len(pids)
    state = RankerState(0, q0)
    trace = EpisodeTrace(inst.id, direction, hops)

    if hops == 2:
        first_role, second_role = (
            ("head", "tail") if direction == "head_first" else ("tail", "head"))
        mask = [True] * k
        state, i1, scored = _step(state, encs, pids, mask, mode, rng, ps,
                                  first_role, trace, conditional)
        mask2 = list(mask)
        mask2[i1] = False
        reuse = None if conditional else scored
        state, i2, _ = _step(state, encs, pids, mask2, mode, rng, ps,
                             second_role, trace, conditional, reuse_vec=reuse)
        head_id, tail_id = ((pids[i1], pids[i2]) if direction == "head_first"
                            else (pids[i2], pids[i1]))
        return _chain_2hop(inst, head_id, tail_id), trace

    # three hops: head and tail picked independently from the initial state,
    # middle conditioned on both
    mask = [True] * k
    state_h, ih, scored = _step(state, encs, pids, mask, mode, rng, ps,
                                "head", trace, conditional)
    state_t, it, _ = _step(state_h, encs, pids, mask, mode, rng, ps,
                           "tail", trace, conditional, reuse_vec=scored)
    mask_m = [i not in (ih, it) for i in range(k)]
    reuse = None if conditional else scored
    _, im, _ = _step(state_t, encs, pids, mask_m, mode, rng, ps,
                     "middle", trace, conditional, reuse_vec=reuse)
    return _chain_3hop(inst, pids[ih], pids[im], pids[it]), trace


def decode_from_candidates(inst: QuestionInstance, candidates, hops: int,
                           ps: ParameterSet, direction: str = "tail_first",
                           conditional: bool = True,
                           return_logprob: bool = False):
    """Pick the candidate chain with the highest teacher-forced log-likelihood.

    Each chain is scored by forcing its own passages through the selection
    steps in the configured direction and summing the step log-probs.
    Exact ties go to the lexicographically smallest chain. No gradients
    flow; scores are read off the forward values.
    """
    chains = sorted(set(candidates), key=CandidateChain.sort_key)
    if not chains:
        raise NoCandidateError("empty candidate set")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")

    q0 = encode_question(inst.question_tokens, ps)
    encs = [encode_passage(p, ps) for p in inst.passages]
    pids = [p.id for p in inst.passages]
    index_of = {pid: i for i, pid in enumerate(pids)}
    k = len(pids)
    full = [True] * k
    vec1, matches = _score_pool(q0, encs, full, ps)
    logp1 = np.log(softmax(vec1, full).data)

    second_cache: dict = {}

    def second_logp(first_idx: int) -> np.ndarray:
        if first_idx not in second_cache:
            mask = [i != first_idx for i in range(k)]
            if conditional:
                st = advance(RankerState(0, q0), pids[first_idx],
                             matches[first_idx].matching_state, ps,
                             Tensor(np.asarray(0.0)))
                vec2, _ = _score_pool(st.query_state, encs, mask, ps)
            else:
                vec2 = vec1
            probs = softmax(vec2, mask).data
            with np.errstate(divide="ignore"):
                second_cache[first_idx] = np.log(probs)
        return second_cache[first_idx]

    middle_cache: dict = {}

    def middle_logp(ih: int, it: int) -> np.ndarray:
        key = (ih, it)
        if key not in middle_cache:
            mask = [i not in (ih, it) for i in range(k)]
            if conditional:
                st = advance(RankerState(0, q0), pids[ih],
                             matches[ih].matching_state, ps, Tensor(np.asarray(0.0)))
                st = advance(st, pids[it], matches[it].matching_state, ps,
                             Tensor(np.asarray(0.0)))
                vec_m, _ = _score_pool(st.query_state, encs, mask, ps)
            else:
                vec_m = vec1
            probs = softmax(vec_m, mask).data
            with np.errstate(divide="ignore"):
                middle_cache[key] = np.log(probs)
        return middle_cache[key]

    best = None
    best_lp = -np.inf
    for chain in chains:
        if hops == 2:
            ih, it = index_of[chain.passage_ids[0]], index_of[chain.passage_ids[1]]
            first, second = (ih, it) if direction == "head_first" else (it, ih)
            lp = logp1[first] + second_logp(first)[second]
        else:
            ih = index_of[chain.passage_ids[0]]
            im = index_of[chain.passage_ids[1]]
            it = index_of[chain.passage_ids[2]]
            lp = logp1[ih] + logp1[it] + middle_logp(ih, it)[im]
        if lp > best_lp:
            best, best_lp = chain, lp
    if return_logprob:
        return best, float(best_lp)
    return best
