"""Encoders, the step-conditioned decoder, and codebook-backed prediction heads.

Query and item encoders share one token embedding table but own separate
two-layer tanh MLPs. The decoder is a per-step conditional network over
(query vector, sum of prior code vectors, step embedding); its per-level
prediction head is the quantizer codebook itself unless weight sharing is
switched off, in which case cloned head tensors are used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import quantizer as qz
from .errors import ConfigurationError
from .numerics import Tensor

COSINE, DOT = "cosine", "dot"
SHARED, SEPARATE = "shared", "separate"


@dataclass
class ModelParams:
    """Every trainable tensor, grouped for the differential learning rates."""

    dim: int
    level_sizes: tuple
    vocab_size: int
    token_embedding: Tensor
    item_mlp: dict
    query_mlp: dict
    decoder_mlp: dict
    step_embeddings: Tensor
    codebooks: list
    log_gamma: Tensor
    decoder_heads: list | None = field(default=None)

    @property
    def n_levels(self):
        return len(self.level_sizes)

    def gamma(self):
        return nm.exp(self.log_gamma)

    def gamma_value(self):
        return float(np.exp(self.log_gamma.data))

    def head_tensor(self, level):
        if self.decoder_heads is not None:
            return self.decoder_heads[level]
        return self.codebooks[level]

    def item_encoder_params(self):
        return [self.item_mlp[k] for k in ("w1", "b1", "w2", "b2")]

    def backbone_params(self):
        out = [self.token_embedding]
        for mlp in (self.item_mlp, self.query_mlp, self.decoder_mlp):
            out += [mlp[k] for k in ("w1", "b1", "w2", "b2")]
        out.append(self.step_embeddings)
        return out

    def quantizer_params(self):
        out = list(self.codebooks) + [self.log_gamma]
        if self.decoder_heads is not None:
            out += self.decoder_heads
        return out

    def all_params(self):
        return self.backbone_params() + self.quantizer_params()

    def named_params(self):
        named = {"token_embedding": self.token_embedding,
                 "step_embeddings": self.step_embeddings,
                 "log_gamma": self.log_gamma}
        for prefix, mlp in (("item", self.item_mlp), ("query", self.query_mlp),
                            ("decoder", self.decoder_mlp)):
            for k, t in mlp.items():
                named[f"{prefix}_mlp.{k}"] = t
        for j, book in enumerate(self.codebooks):
            named[f"codebook.{j}"] = book
        if self.decoder_heads is not None:
            for j, head in enumerate(self.decoder_heads):
                named[f"decoder_head.{j}"] = head
        return named

    def clone_decoder_heads(self):
        """Break weight sharing: heads become independent copies of the codebooks."""
        self.decoder_heads = [nm.parameter(book.data.copy(), name=f"decoder_head.{j}")
                              for j, book in enumerate(self.codebooks)]

    def set_codebooks(self, arrays):
        self.codebooks = [nm.parameter(np.array(a, dtype=np.float64), name=f"codebook.{j}")
                          for j, a in enumerate(arrays)]


def _init_mlp(rng, d_in, d_hidden, d_out, prefix):
    def w(shape):
        return nm.parameter(rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape))

    return {"w1": w((d_in, d_hidden)), "b1": nm.parameter(np.zeros(d_hidden)),
            "w2": w((d_hidden, d_out)), "b2": nm.parameter(np.zeros(d_out))}


def init_params(dim, level_sizes, vocab_size, rng):
    """Fresh parameters; codebooks start as random unit rows until k-means runs."""
    if any(k < 2 for k in level_sizes):
        raise ConfigurationError("every level needs at least 2 codes")
    token = nm.parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)),
                         name="token_embedding")
    books = []
    for k in level_sizes:
        rows = rng.normal(size=(k, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        books.append(rows)
    params = ModelParams(
        dim=dim,
        level_sizes=tuple(level_sizes),
        vocab_size=vocab_size,
        token_embedding=token,
        item_mlp=_init_mlp(rng, dim, dim, dim, "item"),
        query_mlp=_init_mlp(rng, 2 * dim, dim, dim, "query"),
        decoder_mlp=_init_mlp(rng, 3 * dim, dim, dim, "decoder"),
        step_embeddings=nm.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(level_sizes), dim)),
            name="step_embeddings"),
        codebooks=[],
        log_gamma=nm.parameter(np.log(qz.GAMMA_INIT), name="log_gamma"),
    )
    params.set_codebooks(books)
    return params


def _mlp_apply(mlp, x):
    h = nm.tanh(nm.add(nm.matmul(x, mlp["w1"]), mlp["b1"]))
    return nm.add(nm.matmul(h, mlp["w2"]), mlp["b2"])


def _mean_embedding(params, tokens):
    if len(tokens) == 0:
        raise ValueError("token sequence must be non-empty")
    return nm.mean_axis(nm.gather_rows(params.token_embedding, tokens), axis=0)


def encode_item(params, tokens):
    """Mean token embedding through the item MLP; stays on the gradient tape."""
    return _mlp_apply(params.item_mlp, _mean_embedding(params, tokens))


def encode_item_batch(params, token_lists):
    pooled = nm.stack_rows([_mean_embedding(params, t) for t in token_lists])
    return _mlp_apply(params.item_mlp, pooled)


def _query_features(params, query_tokens, history_token_lists):
    if len(query_tokens) == 0:
        raise ValueError("query must be non-empty")
    q = _mean_embedding(params, query_tokens)
    if history_token_lists:
        titles = [_mean_embedding(params, t) for t in history_token_lists]
        h = nm.mean_axis(nm.stack_rows(titles), axis=0)
    else:
        h = nm.constant(np.zeros(params.dim))
    return nm.concat([q, h])


def encode_query(params, query_tokens, history_token_lists=()):
    """Query plus pooled history titles through the query MLP, unit-normalized."""
    return nm.normalize(_mlp_apply(params.query_mlp, _query_features(params, query_tokens, history_token_lists)))


def encode_query_batch(params, query_token_lists, history_lists):
    feats = nm.stack_rows([
        _query_features(params, q, h) for q, h in zip(query_token_lists, history_lists)])
    return nm.normalize(_mlp_apply(params.query_mlp, feats))


def encode_batch_shared(params, batch, item_tokens):
    """(z_base, z_q) for a batch of interactions, pooling each distinct item's
    title embedding once. Duplicated targets and history entries share graph
    nodes, which shrinks the tape without changing any forward value."""
    distinct = sorted({i.target for i in batch} | {h for i in batch for h in i.history})
    pooled = {i: _mean_embedding(params, item_tokens[i]) for i in distinct}
    z_base = _mlp_apply(params.item_mlp,
                        nm.stack_rows([pooled[i.target] for i in batch]))
    feats = []
    zero = nm.constant(np.zeros(params.dim))
    for inter in batch:
        q = _mean_embedding(params, inter.query)
        if inter.history:
            h = nm.mean_axis(nm.stack_rows([pooled[hid] for hid in inter.history]), axis=0)
        else:
            h = zero
        feats.append(nm.concat([q, h]))
    z_q = nm.normalize(_mlp_apply(params.query_mlp, nm.stack_rows(feats)))
    return z_base, z_q


def decode_step(params, z_q, prior_vectors, t):
    """Hidden state for level t (1-based) given the decoded prefix's vectors."""
    m = params.n_levels
    if not 1 <= t <= m:
        raise ValueError(f"step {t} outside 1..{m}")
    if len(prior_vectors) != t - 1:
        raise ValueError(f"step {t} expects {t - 1} prior vectors, got {len(prior_vectors)}")
    prior = nm.constant(np.zeros(params.dim))
    for v in prior_vectors:
        prior = nm.add(prior, v)
    step = nm.take_row(params.step_embeddings, t - 1)
    return _mlp_apply(params.decoder_mlp, nm.concat([z_q, prior, step]))


def decode_step_batch(params, z_q, prior_sum, t):
    """Batched decode: z_q and prior_sum are (B, d); prior_sum is the running
    sum of the t-1 prior code vectors (zeros at t=1)."""
    if not 1 <= t <= params.n_levels:
        raise ValueError(f"step {t} outside 1..{params.n_levels}")
    n = z_q.data.shape[0]
    step = nm.broadcast_row(nm.take_row(params.step_embeddings, t - 1), n)
    return _mlp_apply(params.decoder_mlp, nm.concat_cols([z_q, prior_sum, step]))


def head_logits(params, h, level, geometry=COSINE):
    """Per-level prediction scores against the level's head tensor.

    Under weight sharing the head tensor *is* the quantizer codebook, so the
    logit is the same scaled cosine the quantizer scores with.
    """
    head = params.head_tensor(level)
    if geometry == COSINE:
        return qz.cosine_logits(h, head, params.gamma())
    if geometry == DOT:
        return qz.dot_logits(h, head)
    raise ConfigurationError(f"unknown geometry {geometry!r}")


def dot_head_logits(params, h, level):
    return head_logits(params, h, level, geometry=DOT)
