"""Offline index, trie-constrained beam search, ranking, and diagnostics.

Items are indexed under their hard semantic IDs; decoding is restricted to
trie prefixes that exist in the corpus, so the generator can never emit an
identifier with no items behind it. Candidate ranking is lexicographic:
beam score first, fine-grained cosine second, item id last.

Beam hypotheses are scored one at a time through the same single-vector
decoder path an exhaustive enumerator uses, so beam search and the
enumeration oracle agree bit for bit, tie rules included.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import model as md
from . import numerics as nm
from . import quantizer as qz
from .errors import ConfigurationError

EVAL_HIT_KS = (1, 5, 10, 20)
EVAL_NDCG_KS = (5, 10, 20)
HUBNESS_K = 10
HUBNESS_SAMPLE = 1000


@dataclass
class SidIndex:
    """Trie over corpus semantic IDs plus the normalized embedding cache."""

    n_levels: int
    leaves: dict                      # sid tuple -> sorted list of item ids
    trie: dict                        # nested code -> subtrie dicts
    embeddings: dict                  # item id -> unit-norm vector
    raw_norms: dict                   # item id -> pre-normalization norm
    sids: dict = field(default_factory=dict)  # item id -> sid tuple

    @property
    def n_items(self):
        return len(self.embeddings)

    def children(self, prefix):
        node = self.trie
        for code in prefix:
            node = node.get(code)
            if node is None:
                return []
        return sorted(node.keys())

    def items_for(self, sid):
        return self.leaves.get(tuple(sid), [])

    def all_sids(self):
        return sorted(self.leaves.keys())


def build_index(items, params, geometry=md.COSINE):
    """Assign every item its hard SID and cache its normalized embedding."""
    token_lists = [it.tokens for it in items]
    z = md.encode_item_batch(params, token_lists).data
    codes = qz.hard_assign(z, params.codebooks, geometry=geometry)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < nm.DEGENERATE_NORM):
        raise nm.DegenerateVectorError("an item embedding collapsed to zero")

    leaves, trie, embeddings, raw_norms, sid_of = {}, {}, {}, {}, {}
    for row, item in enumerate(items):
        sid = tuple(int(c) for c in codes[row])
        leaves.setdefault(sid, []).append(item.item_id)
        node = trie
        for code in sid:
            node = node.setdefault(code, {})
        embeddings[item.item_id] = z[row] / norms[row]
        raw_norms[item.item_id] = float(norms[row])
        sid_of[item.item_id] = sid
    for sid in leaves:
        leaves[sid].sort()
    return SidIndex(n_levels=len(params.codebooks), leaves=leaves, trie=trie,
                    embeddings=embeddings, raw_norms=raw_norms, sids=sid_of)


def _prefix_scores(params, z_q, prefix, allowed, geometry):
    """Restricted log-softmax over the trie children of one prefix."""
    priors = [nm.take_row(params.codebooks[j], code) for j, code in enumerate(prefix)]
    h = md.decode_step(params, nm.constant(z_q), priors, len(prefix) + 1)
    logits = md.head_logits(params, h, len(prefix), geometry=geometry).data
    sub = logits[allowed]
    m = sub.max()
    return sub - (m + np.log(np.exp(sub - m).sum()))


def constrained_beam_search(params, z_q, index, beam_size, geometry=md.COSINE):
    """Beam search over trie-valid code paths; returns [(sid, score)] ranked.

    Result ordering is score descending with SID-lexicographic tie-breaks;
    the same rule prunes hypotheses mid-search.
    """
    if beam_size < 1:
        raise ConfigurationError("beam_size must be at least 1")
    if not index.leaves:
        raise ConfigurationError("cannot search an empty index")
    z_q = np.asarray(z_q, dtype=np.float64)

    beam = [(0.0, ())]
    for _ in range(index.n_levels):
        candidates = []
        for score, prefix in beam:
            allowed = index.children(prefix)
            logps = _prefix_scores(params, z_q, prefix, allowed, geometry)
            for code, logp in zip(allowed, logps):
                candidates.append((score + logp, prefix + (code,)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beam = candidates[:beam_size]
    return [(sid, score) for score, sid in beam]


def rank_candidates(scored_sids, z_q, index, k):
    """Expand SIDs to items ordered by (beam score, query cosine, item id)."""
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    z_q = np.asarray(z_q, dtype=np.float64)
    rows = []
    for sid, score in scored_sids:
        for item_id in index.items_for(sid):
            cos = float(z_q @ index.embeddings[item_id])
            rows.append((-score, -cos, item_id))
    rows.sort()
    return [item_id for _, _, item_id in rows[:k]]


def encode_queries(params, interactions, item_tokens, chunk=512):
    """Unit query vectors for a list of interactions, as one (n, d) array."""
    out = []
    for lo in range(0, len(interactions), chunk):
        part = interactions[lo:lo + chunk]
        z = md.encode_query_batch(
            params,
            [i.query for i in part],
            [[item_tokens[h] for h in i.history] for i in part])
        out.append(z.data)
    return np.vstack(out)


def retrieve(params, index, interactions, item_tokens, beam_size=10, k=10,
             geometry=md.COSINE):
    """Ranked top-k item ids for every interaction's query."""
    zq = encode_queries(params, interactions, item_tokens)
    ranked = []
    for i in range(len(interactions)):
        scored = constrained_beam_search(params, zq[i], index, beam_size, geometry)
        ranked.append(rank_candidates(scored, zq[i], index, k))
    return ranked


# --- metrics ---


def hitrate_at_k(ranked_lists, targets, k):
    if len(ranked_lists) != len(targets):
        raise ValueError("ranked lists and targets must align")
    hits = sum(1 for ranked, t in zip(ranked_lists, targets) if t in ranked[:k])
    return hits / len(targets) if targets else 0.0


def ndcg_at_k(ranked_lists, targets, k):
    """Single-relevant-item NDCG: 1/log2(rank+1) within the cutoff, else 0."""
    if len(ranked_lists) != len(targets):
        raise ValueError("ranked lists and targets must align")
    if not targets:
        return 0.0
    total = 0.0
    for ranked, t in zip(ranked_lists, targets):
        head = ranked[:k]
        if t in head:
            rank = head.index(t) + 1
            total += 1.0 / np.log2(rank + 1)
    return total / len(targets)


def metric_table(ranked_lists, targets, hit_ks=EVAL_HIT_KS, ndcg_ks=EVAL_NDCG_KS):
    return {
        "hitrate": {k: hitrate_at_k(ranked_lists, targets, k) for k in hit_ks},
        "ndcg": {k: ndcg_at_k(ranked_lists, targets, k) for k in ndcg_ks},
        "n_queries": len(targets),
    }


def bucket_report(ranked_lists, targets, bucketing,
                  hit_ks=EVAL_HIT_KS, ndcg_ks=EVAL_NDCG_KS):
    """Metrics recomputed per popularity bucket of the target; empty buckets
    are reported as None markers."""
    report = {}
    for b in range(bucketing.bucket_count):
        rows = [(r, t) for r, t in zip(ranked_lists, targets)
                if bucketing.bucket_of(t) == b]
        if not rows:
            report[b] = None
            continue
        rl, tg = zip(*rows)
        report[b] = metric_table(list(rl), list(tg), hit_ks, ndcg_ks)
    return report


# --- hubness and codebook health ---


def _pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.std() == 0.0 or y.std() == 0.0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def _skewness(x):
    x = np.asarray(x, dtype=np.float64)
    sigma = x.std()
    if sigma == 0.0:
        return 0.0
    return float(np.mean((x - x.mean()) ** 3) / sigma**3)


def hubness_stats(params, index, interactions, item_tokens, items, k=HUBNESS_K,
                  beam_size=10, geometry=md.COSINE, sample=HUBNESS_SAMPLE):
    """Frequency/norm correlation and k-occurrence skewness diagnostics.

    Norms are the raw, pre-normalization item embedding norms; k-occurrence
    counts how many sampled queries retrieve each item in their top k.
    """
    if len(interactions) < 30:
        raise ConfigurationError("hubness diagnostics need at least 30 queries")
    sampled = interactions[:sample]
    ranked = retrieve(params, index, sampled, item_tokens,
                      beam_size=beam_size, k=k, geometry=geometry)
    n_k = {it.item_id: 0 for it in items}
    for lst in ranked:
        for item_id in lst:
            n_k[item_id] += 1
    ids = sorted(n_k)
    occurrences = np.array([n_k[i] for i in ids], dtype=np.float64)
    freqs = np.array([it.train_frequency for it in sorted(items, key=lambda x: x.item_id)],
                     dtype=np.float64)
    norms = np.array([index.raw_norms[i] for i in ids])
    return {
        "freq_norm_corr": _pearson(freqs, norms),
        "k_occurrence_skewness": _skewness(occurrences),
        "k": k,
        "n_queries": len(sampled),
        "n_k": {int(i): int(n_k[i]) for i in ids},
    }


def codebook_perplexity(index, level_sizes):
    """exp(entropy) of per-level code usage over the indexed corpus."""
    out = []
    sids = np.array([index.sids[i] for i in sorted(index.sids)])
    for j, k in enumerate(level_sizes):
        counts = np.bincount(sids[:, j], minlength=k).astype(np.float64)
        p = counts / counts.sum()
        nz = p[p > 0]
        out.append(float(np.exp(-(nz * np.log(nz)).sum())))
    return out


# --- full evaluation pass ---


def evaluate(params, config, index, interactions, item_tokens, items,
             bucketing=None, beam_size=10, k_max=20):
    """One evaluation sweep: beam search every query, then all report tables."""
    zq = encode_queries(params, interactions, item_tokens)
    ranked = []
    for i in range(len(interactions)):
        scored = constrained_beam_search(params, zq[i], index, beam_size,
                                         config.geometry)
        ranked.append(rank_candidates(scored, zq[i], index, k_max))
    targets = [i.target for i in interactions]

    report = {
        "beam_size": beam_size,
        "overall": metric_table(ranked, targets),
        "codebook_perplexity": codebook_perplexity(index, config.level_sizes),
        "n_items": index.n_items,
        "n_distinct_sids": len(index.leaves),
    }
    if bucketing is not None:
        report["per_bucket"] = bucket_report(ranked, targets, bucketing)
    if len(interactions) >= 30:
        report["hubness"] = {
            key: val
            for key, val in hubness_stats(params, index, interactions, item_tokens,
                                          items, beam_size=beam_size,
                                          geometry=config.geometry).items()
            if key != "n_k"
        }
    return report, ranked


# --- tabular exports ---


def _fmt(x):
    return repr(float(x))


def export_embeddings(params, items, path, geometry=md.COSINE):
    """CSV of item id, SID, raw norm, and the full embedding per row."""
    token_lists = [it.tokens for it in items]
    z = md.encode_item_batch(params, token_lists).data
    codes = qz.hard_assign(z, params.codebooks, geometry=geometry)
    dim = z.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("item_id,sid,norm," + ",".join(f"e{i}" for i in range(dim)) + "\n")
        for row, item in enumerate(items):
            sid = "-".join(str(int(c)) for c in codes[row])
            norm = np.linalg.norm(z[row])
            fh.write(",".join([str(item.item_id), sid, _fmt(norm)]
                              + [_fmt(v) for v in z[row]]) + "\n")
    return path


def write_bucket_csv(report, path, hit_ks=EVAL_HIT_KS, ndcg_ks=EVAL_NDCG_KS):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        header = ["bucket"] + [f"hit@{k}" for k in hit_ks] + [f"ndcg@{k}" for k in ndcg_ks] + ["n_queries"]
        fh.write(",".join(header) + "\n")
        for b in sorted(report):
            table = report[b]
            if table is None:
                fh.write(f"{b},omitted" + ",omitted" * (len(header) - 2) + "\n")
                continue
            row = [str(b)] + [_fmt(table["hitrate"][k]) for k in hit_ks] \
                + [_fmt(table["ndcg"][k]) for k in ndcg_ks] + [str(table["n_queries"])]
            fh.write(",".join(row) + "\n")
    return path


def write_hubness_csv(stats, items, index, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("item_id,freq,norm,n_k\n")
        for it in sorted(items, key=lambda x: x.item_id):
            fh.write(",".join([str(it.item_id), str(it.train_frequency),
                               _fmt(index.raw_norms[it.item_id]),
                               str(stats["n_k"][it.item_id])]) + "\n")
    return path


def read_embedding_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            vec = np.array([float(v) for k, v in row.items() if k.startswith("e")])
            rows.append((int(row["item_id"]), row["sid"], float(row["norm"]), vec))
    return rows
