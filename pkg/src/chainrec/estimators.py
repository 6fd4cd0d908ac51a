"""Estimator-style wrappers with the fit/predict/score interface.

These adapt the episode-level training functions to the scikit-learn
convention: constructor arguments are stored verbatim, fitted state lands
in trailing-underscore attributes, and ``get_params``/``set_params``/
``clone`` behave as usual. X is a list of question instances, y the
matching gold annotations (optional for fitting, required for scoring).
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import chain_accuracy, predict_chains
from .ranker import RankerConfig
from .reasoner import ReasonerConfig
from .training import (
    TrainConfig, infer_vocab, train_cooperative, train_ranker,
)

__all__ = ["ChainRanker", "CooperativeChainRanker"]


class ChainRanker(BaseEstimator):
    """Sequential passage ranker trained with policy gradients.

    With ``conditional=False`` the query state is frozen, which is the
    independent-scoring baseline.
    """

    def __init__(self, hops=2, direction="tail_first", conditional=True,
                 epochs=5, learning_rate=1e-2, baseline_decay=0.9,
                 grad_clip_norm=5.0, seed=0, vocab_size=None, embed_dim=12,
                 hidden_dim=8, match_hidden=10):
        self.hops = hops
        self.direction = direction
        self.conditional = conditional
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.baseline_decay = baseline_decay
        self.grad_clip_norm = grad_clip_norm
        self.seed = seed
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.match_hidden = match_hidden

    def _train_config(self, corpus) -> TrainConfig:
        return TrainConfig(
            hops=self.hops,
            direction=self.direction,
            episodes=self.epochs * len(corpus),
            learning_rate=self.learning_rate,
            baseline_decay=self.baseline_decay,
            grad_clip_norm=self.grad_clip_norm,
            seed=self.seed,
        )

    def _vocab(self, X) -> int:
        # beware: inferring from a training split breaks on unseen dev
        # tokens, so pass vocab_size explicitly when splitting
        return self.vocab_size if self.vocab_size is not None else infer_vocab(X)

    def _model_config(self, X) -> RankerConfig:
        return RankerConfig(
            vocab_size=self._vocab(X),
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            match_hidden=self.match_hidden,
        )

    def fit(self, X, y=None):
        cfg = self._train_config(X)
        res = train_ranker(X, cfg, model_cfg=self._model_config(X),
                           conditional=self.conditional)
        self.params_ = res.params
        self.log_ = res.log
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return predict_chains(X, self.params_, hops=self.hops,
                              direction=self.direction,
                              conditional=self.conditional)

    def score(self, X, y, mode: str = "full_chain") -> float:
        return chain_accuracy(self.predict(X), y, mode)


class CooperativeChainRanker(ChainRanker):
    """Ranker refined by the entity-prediction bonus game after warmup.

    Fitting first trains a conditional ranker for ``epochs``, then runs
    ``cooperative_epochs`` of alternating reader/ranker updates.
    Prediction scores each candidate chain jointly: the ranker's chain
    log-likelihood plus the reader's log-probability of the linking
    entity, so chains the ranker cannot tell apart are split by the
    reader.
    """

    def __init__(self, hops=2, direction="tail_first", epochs=5,
                 cooperative_epochs=4, learning_rate=1e-2,
                 cooperative_learning_rate=None, baseline_decay=0.9,
                 grad_clip_norm=5.0, cooperative_bonus=1.0,
                 bonus_placement="second_step", ranker_epochs_per_reasoner=1,
                 seed=0, vocab_size=None, embed_dim=12, hidden_dim=8,
                 match_hidden=10, reasoner_embed_dim=12, reasoner_hidden_dim=8):
        super().__init__(hops=hops, direction=direction, conditional=True,
                         epochs=epochs, learning_rate=learning_rate,
                         baseline_decay=baseline_decay,
                         grad_clip_norm=grad_clip_norm, seed=seed,
                         vocab_size=vocab_size, embed_dim=embed_dim,
                         hidden_dim=hidden_dim, match_hidden=match_hidden)
        self.cooperative_epochs = cooperative_epochs
        self.cooperative_learning_rate = cooperative_learning_rate
        self.cooperative_bonus = cooperative_bonus
        self.bonus_placement = bonus_placement
        self.ranker_epochs_per_reasoner = ranker_epochs_per_reasoner
        self.reasoner_embed_dim = reasoner_embed_dim
        self.reasoner_hidden_dim = reasoner_hidden_dim

    def fit(self, X, y=None):
        warm = train_ranker(X, self._train_config(X),
                            model_cfg=self._model_config(X))
        lr = (self.learning_rate if self.cooperative_learning_rate is None
              else self.cooperative_learning_rate)
        coop_cfg = TrainConfig(
            hops=self.hops,
            direction=self.direction,
            episodes=self.cooperative_epochs * len(X),
            learning_rate=lr,
            baseline_decay=self.baseline_decay,
            grad_clip_norm=self.grad_clip_norm,
            cooperative_bonus=self.cooperative_bonus,
            bonus_placement=self.bonus_placement,
            ranker_epochs_per_reasoner=self.ranker_epochs_per_reasoner,
            seed=self.seed,
        )
        reasoner_cfg = ReasonerConfig(
            vocab_size=self._vocab(X),
            embed_dim=self.reasoner_embed_dim,
            hidden_dim=self.reasoner_hidden_dim,
        )
        res = train_cooperative(X, coop_cfg, warm_ranker=warm.params,
                                reasoner_cfg=reasoner_cfg)
        self.params_ = res.params
        self.reasoner_params_ = res.reasoner_params
        self.log_ = warm.log + res.log
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return predict_chains(X, self.params_, hops=self.hops,
                              direction=self.direction, conditional=True,
                              reasoner_params=self.reasoner_params_)
