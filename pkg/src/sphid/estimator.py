"""Scikit-learn style facade over training, indexing, and retrieval.

`fit` takes the item corpus and a chronological training split of
interactions; `predict` returns the top-ranked item id per query and
`retrieve` the full top-k lists. Hyperparameters follow the estimator
convention (stored verbatim in __init__, surfaced via get_params), so the
retriever composes with sklearn tooling such as cloning and grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import objective as ob
from . import retrieval as rt


def _check_items(items):
    if not items:
        raise ValueError("items must be a non-empty list of ItemRecord")
    seen = set()
    for it in items:
        if not it.tokens:
            raise ValueError(f"item {it.item_id} has an empty title")
        if it.item_id in seen:
            raise ValueError(f"duplicate item_id {it.item_id}")
        seen.add(it.item_id)
    return seen


def _check_interactions(interactions, known_ids):
    if not interactions:
        raise ValueError("interactions must be non-empty")
    for inter in interactions:
        if not inter.query:
            raise ValueError(f"interaction at ts={inter.ts} has an empty query")
        if inter.target not in known_ids:
            raise ValueError(f"unknown target item {inter.target}")
        for h in inter.history:
            if h not in known_ids:
                raise ValueError(f"unknown history item {h}")


class SemanticIdRetriever(BaseEstimator):
    """Generative retriever over hierarchical spherical code sequences."""

    def __init__(self, dim=64, level_sizes=(64, 32, 16), epochs=30, batch_size=128,
                 lr_backbone=1e-3, lr_quantizer=1e-2, warmup_steps=1000,
                 tau_start=1.0, tau_end=0.1, tau_cl=0.07, beta=0.25,
                 loss_weights=(1.0, 1.0, 1.0, 1.0, 1.0), gradient_path="soft",
                 geometry="cosine", weight_sharing="shared", diversity="on",
                 kmeans_iterations=25, beam_size=10, seed=0):
        self.dim = dim
        self.level_sizes = level_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_backbone = lr_backbone
        self.lr_quantizer = lr_quantizer
        self.warmup_steps = warmup_steps
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.tau_cl = tau_cl
        self.beta = beta
        self.loss_weights = loss_weights
        self.gradient_path = gradient_path
        self.geometry = geometry
        self.weight_sharing = weight_sharing
        self.diversity = diversity
        self.kmeans_iterations = kmeans_iterations
        self.beam_size = beam_size
        self.seed = seed

    def _config(self):
        return ob.TrainConfig(
            dim=self.dim, level_sizes=tuple(self.level_sizes), epochs=self.epochs,
            batch_size=self.batch_size, lr_backbone=self.lr_backbone,
            lr_quantizer=self.lr_quantizer, warmup_steps=self.warmup_steps,
            tau_start=self.tau_start, tau_end=self.tau_end, tau_cl=self.tau_cl,
            beta=self.beta, loss_weights=tuple(self.loss_weights),
            gradient_path=self.gradient_path, geometry=self.geometry,
            weight_sharing=self.weight_sharing, diversity=self.diversity,
            kmeans_iterations=self.kmeans_iterations, seed=self.seed).validate()

    def fit(self, items, interactions):
        """Train on (items, train interactions) and build the retrieval index."""
        known = _check_items(items)
        _check_interactions(interactions, known)
        config = self._config()
        result = ob.train(config, items, interactions)
        self.config_ = config
        self.params_ = result.params
        self.trace_ = result.trace
        self.items_ = items
        self.item_tokens_ = {it.item_id: it.tokens for it in items}
        self.index_ = rt.build_index(items, self.params_, geometry=self.geometry)
        return self

    def _require_fitted(self):
        if not hasattr(self, "index_"):
            raise NotFittedError("call fit before retrieving")

    def retrieve(self, interactions, k=10):
        """Ranked top-k item ids per interaction query."""
        self._require_fitted()
        _check_interactions(interactions, set(self.item_tokens_))
        return rt.retrieve(self.params_, self.index_, interactions,
                           self.item_tokens_, beam_size=self.beam_size, k=k,
                           geometry=self.geometry)

    def predict(self, interactions):
        """Top-ranked item id per query."""
        ranked = self.retrieve(interactions, k=1)
        return np.array([r[0] if r else -1 for r in ranked])

    def score(self, interactions, k=10):
        """HitRate@k of the target ids, the estimator's default quality score."""
        ranked = self.retrieve(interactions, k=k)
        return rt.hitrate_at_k(ranked, [i.target for i in interactions], k)
