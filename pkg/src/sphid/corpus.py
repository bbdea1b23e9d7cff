"""Synthetic long-tail corpus generation, chronological splits, and bucketing.

Items get a latent topic; titles are tokens from the topic's pool; queries
are a noisy subset of the target's title; histories are the most recent
same-topic targets. Popularity over items is Zipf-distributed, so the head
is orders of magnitude more frequent than the tail.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError

HISTORY_WINDOW = 10
DEFAULT_TOPICS = 20
QUERY_TITLE_TOKENS = 3
QUERY_NOISE_TOKENS = 1


@dataclass
class ItemRecord:
    item_id: int
    tokens: list[int]
    train_frequency: int = field(default=0, compare=False)


@dataclass
class Interaction:
    ts: int
    query: list[int]
    history: list[int]
    target: int


@dataclass
class PopularityBucketing:
    """Assignment of items to frequency buckets; bucket 0 is the head."""

    bucket_count: int
    assignment: dict[int, int]

    def bucket_of(self, item_id):
        return self.assignment[item_id]

    def items_in(self, bucket):
        return sorted(i for i, b in self.assignment.items() if b == bucket)


def generate_corpus(n_items, vocab_size, n_interactions, zipf_exponent, seed,
                    n_topics=DEFAULT_TOPICS):
    """Build a deterministic synthetic corpus with Zipf item popularity.

    Returns (items, interactions). Interactions carry monotone timestamps,
    queries of QUERY_TITLE_TOKENS target-title tokens plus noise, and
    histories of up to HISTORY_WINDOW most recent same-topic targets.
    """
    if n_items < 2:
        raise ConfigurationError("n_items must be at least 2")
    if vocab_size < 16:
        raise ConfigurationError("vocab_size must be at least 16")
    if n_interactions < 1:
        raise ConfigurationError("n_interactions must be positive")
    if zipf_exponent <= 1.0:
        raise ConfigurationError("zipf_exponent must exceed 1")

    rng = np.random.default_rng(seed)
    n_topics = max(2, min(n_topics, n_items))

    pool_size = min(vocab_size, max(8, int(round(1.5 * vocab_size / n_topics))))
    topic_pools = [rng.choice(vocab_size, size=pool_size, replace=False)
                   for _ in range(n_topics)]

    items = []
    topics = []
    for item_id in range(n_items):
        topic = int(rng.integers(n_topics))
        length = int(rng.integers(4, 9))
        pool = topic_pools[topic]
        tokens = rng.choice(pool, size=length, replace=length > pool.size)
        items.append(ItemRecord(item_id, [int(t) for t in tokens]))
        topics.append(topic)

    # Zipf over a random permutation so popularity is independent of id order.
    ranks = rng.permutation(n_items)
    weights = 1.0 / np.power(ranks + 1.0, zipf_exponent)
    probs = weights / weights.sum()

    recent_by_topic = [[] for _ in range(n_topics)]
    interactions = []
    for ts in range(n_interactions):
        target = int(rng.choice(n_items, p=probs))
        title = items[target].tokens
        n_pick = min(QUERY_TITLE_TOKENS, len(title))
        picked = rng.choice(len(title), size=n_pick, replace=False)
        query = [title[i] for i in picked]
        query += [int(t) for t in rng.integers(0, vocab_size, size=QUERY_NOISE_TOKENS)]
        topic = topics[target]
        history = list(recent_by_topic[topic][-HISTORY_WINDOW:])
        interactions.append(Interaction(ts, query, history, target))
        recent_by_topic[topic].append(target)

    return items, interactions


def time_split(interactions, train_fraction):
    """Chronologically partition interactions into (train, test)."""
    if not interactions:
        raise ConfigurationError("cannot split an empty interaction list")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must lie strictly between 0 and 1")
    ordered = sorted(interactions, key=lambda x: x.ts)
    n_train = int(len(ordered) * train_fraction)
    return ordered[:n_train], ordered[n_train:]


def count_train_frequencies(items, train_interactions):
    """Fill each item's train_frequency from the training split (in place)."""
    counts = {}
    for inter in train_interactions:
        counts[inter.target] = counts.get(inter.target, 0) + 1
    for item in items:
        item.train_frequency = counts.get(item.item_id, 0)
    return items


def bucket_by_popularity(items, train_interactions, n_buckets=5):
    """Split items into equal-count buckets by descending train frequency.

    Ties break by ascending item_id; frequencies are computed on the training
    split only.
    """
    if n_buckets < 2:
        raise ConfigurationError("need at least 2 buckets")
    if len(items) < n_buckets:
        raise ConfigurationError("fewer items than buckets")
    counts = {}
    for inter in train_interactions:
        counts[inter.target] = counts.get(inter.target, 0) + 1
    order = sorted(items, key=lambda it: (-counts.get(it.item_id, 0), it.item_id))
    assignment = {}
    for bucket, chunk in enumerate(np.array_split(np.arange(len(order)), n_buckets)):
        for idx in chunk:
            assignment[order[idx].item_id] = bucket
    return PopularityBucketing(n_buckets, assignment)


# --- dataset files: items.jsonl and interactions.jsonl ---


def save_dataset(directory, items, interactions):
    """Write items.jsonl and interactions.jsonl under `directory`.

    Train frequencies are derived data and are not stored.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "items.jsonl", "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps({"item_id": item.item_id, "tokens": item.tokens}) + "\n")
    with open(directory / "interactions.jsonl", "w", encoding="utf-8") as fh:
        for inter in interactions:
            fh.write(json.dumps({"ts": inter.ts, "query": inter.query,
                                 "history": inter.history, "target": inter.target}) + "\n")
    return directory / "items.jsonl", directory / "interactions.jsonl"


def _parse_lines(path, required_keys):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [k for k in required_keys if k not in obj]
            if missing:
                raise ParseError(f"{path}:{lineno}: missing fields {missing}")
            records.append(obj)
    return records


def load_dataset(directory):
    """Read (items, interactions) back from a dataset directory."""
    directory = Path(directory)
    item_objs = _parse_lines(directory / "items.jsonl", ("item_id", "tokens"))
    inter_objs = _parse_lines(directory / "interactions.jsonl",
                              ("ts", "query", "history", "target"))
    items = [ItemRecord(int(o["item_id"]), [int(t) for t in o["tokens"]]) for o in item_objs]
    interactions = [Interaction(int(o["ts"]), [int(t) for t in o["query"]],
                                [int(h) for h in o["history"]], int(o["target"]))
                    for o in inter_objs]
    return items, interactions


def vocab_size_of(items):
    """Smallest vocabulary size compatible with the item titles."""
    return max(max(it.tokens) for it in items) + 1
