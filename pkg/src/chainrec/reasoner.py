"""Entity prediction over a selected passage.

The reasoner reads a passage in the context of the question and outputs a
distribution over the entities mentioned in it: the likeliest entity to
link the passage to its neighbour in the chain. Architecture: a
question-to-passage attention layer, a bidirectional GRU, a self-attention
layer, a second bidirectional GRU fed the sum of both attention outputs,
and a per-token linear head. Token scores are softmaxed over the
mention-covered positions only; an entity's probability is the sum over
its mention positions, renormalized in case mentions overlap.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Tensor,
    add,
    concat,
    div,
    matmul,
    mul,
    softmax,
    sub,
    transpose,
    tsum,
)
from .corpus import Passage, QuestionInstance
from .layers import (
    EncoderConfig,
    ParameterSet,
    build_embedding,
    build_gru,
    build_linear,
    cross_entropy,
    embed,
    ffn,
    gru_encode,
    linear,
)


class NoEntityError(ValueError):
    """Raised when a passage mentions no entity at all."""


@dataclass(frozen=True)
class ReasonerConfig:
    vocab_size: int
    embed_dim: int = 12
    hidden_dim: int = 8
    num_layers: int = 1
    bidirectional: bool = True

    def __post_init__(self):
        if self.enc_dim % 2 != 0:
            raise ValueError("reasoner encoder output width must be even "
                             f"(got {self.enc_dim}): the inner bidirectional "
                             "GRUs halve it per direction")

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
                "bidirectional": self.bidirectional}

    @staticmethod
    def from_dict(d: dict) -> "ReasonerConfig":
        allowed = {"vocab_size", "embed_dim", "hidden_dim", "num_layers",
                   "bidirectional"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown reasoner config fields: {sorted(unknown)}")
        return ReasonerConfig(**d)


@dataclass(frozen=True)
class EntityDistribution:
    """Probabilities over the entities mentioned in one passage.

    ``probs`` is graph-bearing so the loss can backpropagate;
    ``entity_ids`` is sorted, and ``token_probs`` keeps the underlying
    token-level distribution for inspection.
    """
    passage_id: str
    entity_ids: tuple
    probs: Tensor
    token_probs: np.ndarray

    @property
    def entries(self) -> list:
        return [(e, float(p)) for e, p in zip(self.entity_ids, self.probs.data)]


def init_reasoner_params(cfg: ReasonerConfig, seed: int) -> ParameterSet:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 7002)))
    ps = ParameterSet()
    build_embedding(ps, "emb", cfg.vocab_size, cfg.embed_dim, rng)
    build_gru(ps, "enc", cfg.embed_dim, cfg.hidden_dim, cfg.num_layers,
              cfg.bidirectional, rng)
    d = cfg.enc_dim
    build_linear(ps, "attn1", 4 * d, d, rng)
    build_gru(ps, "rg1", d, d // 2, 1, True, rng)
    build_linear(ps, "attn2", 4 * d, d, rng)
    build_gru(ps, "rg2", d, d // 2, 1, True, rng)
    build_linear(ps, "head", d, 1, rng)
    return ps


def config_from_params(ps: ParameterSet) -> ReasonerConfig:
    vocab, embed_dim = ps["emb"].data.shape
    hidden = ps["enc.l0.f.bz"].data.shape[0]
    bidirectional = "enc.l0.b.Wz" in ps
    layers = 0
    while f"enc.l{layers}.f.Wz" in ps:
        layers += 1
    return ReasonerConfig(vocab, embed_dim, hidden, layers, bidirectional)


def encode_tokens(tokens, ps: ParameterSet) -> Tensor:
    cfg = config_from_params(ps)
    return gru_encode(embed(tokens, ps, "emb"), cfg.encoder, ps, "enc")


def attention(A: Tensor, B: Tensor, ps: ParameterSet, name: str) -> Tensor:
    """Attend B's positions over A: each b_k pools the a_j weighted by
    softmax over j of a_j . b_k, then the 4-way fused feature is projected
    back to B's width."""
    if A.data.ndim != 2 or A.data.shape[0] < 1:
        raise ShapeMismatchError(f"attention expects a non-empty (N, d) A, got {A.shape}")
    if B.data.ndim != 2 or B.data.shape[0] < 1:
        raise ShapeMismatchError(f"attention expects a non-empty (M, d) B, got {B.shape}")
    e = matmul(B, transpose(A))          # (M, N): row k holds e_jk over j
    attn = softmax(e)                    # normalized across the attending positions
    b_t = matmul(attn, A)                # (M, d)
    feats = concat([B, b_t, sub(B, b_t), mul(B, b_t)])
    return ffn(feats, ps, name)


def reader_encode(Qr: Tensor, Hr: Tensor, ps: ParameterSet) -> Tensor:
    """Contextualize passage states against the question.

    Stack: question attention, BiGRU, self-attention, then a second BiGRU
    over the sum of the two attention outputs (the skip connection).
    """
    cfg = config_from_params(ps)
    d = cfg.enc_dim
    m1 = attention(Qr, Hr, ps, "attn1")
    inner = EncoderConfig(cfg.vocab_size, d, d // 2, 1, True)
    h1 = gru_encode(m1, inner, ps, "rg1")
    m2 = attention(h1, h1, ps, "attn2")
    return gru_encode(add(m1, m2), inner, ps, "rg2")


def _mention_positions(passage: Passage) -> dict:
    spans: dict = {}
    for m in passage.mentions:
        spans.setdefault(m.entity, set()).update(range(m.start, m.end))
    return spans


def entity_distribution(inst: QuestionInstance, passage: Passage, question,
                        ps: ParameterSet) -> EntityDistribution:
    """Distribution over the entities mentioned in ``passage``.

    Token scores from the reader head are softmaxed over mention-covered
    positions; an entity sums its positions' probabilities; the result is
    renormalized so overlapping mentions still yield a distribution.
    """
    if not passage.mentions:
        raise NoEntityError(
            f"instance {inst.id!r}: passage {passage.id!r} mentions no entity")
    qr = encode_tokens(list(question), ps)
    hr = encode_tokens(passage.tokens, ps)
    hp = reader_encode(qr, hr, ps)
    scores = linear(hp, ps, "head").reshape(-1)
    m = len(passage.tokens)
    spans = _mention_positions(passage)
    covered = [any(k in pos for pos in spans.values()) for k in range(m)]
    token_probs = softmax(scores, covered)

    entity_ids = tuple(sorted(spans))
    sel = np.zeros((len(entity_ids), m))
    for i, e in enumerate(entity_ids):
        sel[i, sorted(spans[e])] = 1.0
    raw = matmul(Tensor(sel), token_probs.reshape(-1, 1)).reshape(-1)
    probs = div(raw, tsum(raw))
    return EntityDistribution(passage_id=passage.id, entity_ids=entity_ids,
                              probs=probs, token_probs=token_probs.data.copy())


def reasoner_loss(dist: EntityDistribution, positives) -> Tensor:
    """Binary cross-entropy over mentioned entities; positives get label 1."""
    pos = set(positives)
    unknown = pos - set(dist.entity_ids)
    if unknown:
        raise ValueError(f"positive entities not mentioned in passage "
                         f"{dist.passage_id!r}: {sorted(unknown)}")
    targets = [e in pos for e in dist.entity_ids]
    return cross_entropy(dist.probs, targets)


def top1_entity(dist: EntityDistribution) -> str:
    # entity_ids are sorted, so the first maximum is the smallest id
    return dist.entity_ids[int(np.argmax(dist.probs.data))]
