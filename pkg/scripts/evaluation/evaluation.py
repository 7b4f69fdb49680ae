#!/usr/bin/env python3
"""
Evaluation

k-shot cold-start evaluation: each test user's first k items are observed and
every remaining item is ranked against sampled negatives by base-model score.
It provides:
1. NDCG@k and MRR@k for a single relevant item
2. The evaluation harness (per-user averaging first, then across users)
3. Embedding methods: VM-Rec, rule-based mappings (RM_init, RM_cont),
   a random-embedding floor and the mean warm embedding
4. The easy/hard partition of test users
5. Cross-model transfer (a generator trained on one base model, mapped through another)
"""

import os
import sys
import math
import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

# Add the parent directory to the path so we can import common modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from utils.errors import EvaluationError
from utils.numerics import Rng, progress_disabled
from utils.datastore import kshot_view, sample_negatives
from generation.mapper import dump_weights, infer_embedding

logger = logging.getLogger(__name__)

METHODS = ("vmrec", "rm_init", "rm_cont", "random", "mean")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _rank_of(ranked_items, relevant_item):
    ranked = list(ranked_items)
    if relevant_item not in ranked:
        raise EvaluationError(f"relevant item {relevant_item} is not among the candidates")
    return ranked.index(relevant_item) + 1


def ndcg_at_k(ranked_items, relevant_item, k=5):
    """1 / log2(rank + 1) when the single relevant item is in the top k, else 0."""
    rank = _rank_of(ranked_items, relevant_item)
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def mrr_at_k(ranked_items, relevant_item, k=5):
    """1 / rank when the relevant item is in the top k, else 0."""
    rank = _rank_of(ranked_items, relevant_item)
    return 1.0 / rank if rank <= k else 0.0


def rank_candidates(item_ids, scores):
    """Item ids by descending score; ties go to the smaller item id."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    order = np.lexsort((item_ids, -np.asarray(scores, dtype=np.float64)))
    return [int(i) for i in item_ids[order]]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Metrics of one (method, base model, k, subset) evaluation plus per-user records."""

    method: str
    base_kind: str
    k: int
    ndcg: float
    mrr: float
    user_count: int
    mean_support_size: float
    records: list = field(default_factory=list)
    seed: int = None
    config_digest: str = None
    subset: str = "all"
    absent_users: int = 0
    cutoff: int = 5

    def summary(self):
        return {
            "method": self.method,
            "base": self.base_kind,
            "k": self.k,
            "subset": self.subset,
            f"ndcg@{self.cutoff}": self.ndcg,
            f"mrr@{self.cutoff}": self.mrr,
            "users": self.user_count,
            "absent_users": self.absent_users,
            "mean_support_size": self.mean_support_size,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }


@dataclass(frozen=True)
class SubsetPartition:
    """Test users whose initial k items are / are not some warm user's first k items."""

    k: int
    easy_users: tuple
    hard_users: tuple

    @property
    def easy_fraction(self):
        total = len(self.easy_users) + len(self.hard_users)
        return len(self.easy_users) / total if total else 0.0

    def users(self, subset):
        if subset == "easy":
            return self.easy_users
        if subset == "hard":
            return self.hard_users
        return self.easy_users + self.hard_users


# ---------------------------------------------------------------------------
# Rule-based mappings and the easy/hard partition
# ---------------------------------------------------------------------------

class WarmSequenceIndex:
    """Lookup of warm users by their first-k prefix and by contiguous k-grams anywhere in history."""

    def __init__(self, split):
        self.split = split
        self._prefixes = {}
        self._grams = {}

    def prefix_matches(self, items):
        k = len(items)
        if k not in self._prefixes:
            table = {}
            for user in self.split.warm_users:
                sequence = self.split.sequences[user]
                if len(sequence) >= k:
                    table.setdefault(tuple(sequence[:k]), []).append(user)
            self._prefixes[k] = table
        return self._prefixes[k].get(tuple(items), [])

    def contiguous_matches(self, items):
        k = len(items)
        if k not in self._grams:
            table = {}
            for user in self.split.warm_users:
                sequence = self.split.sequences[user]
                for start in range(len(sequence) - k + 1):
                    bucket = table.setdefault(tuple(sequence[start:start + k]), [])
                    if not bucket or bucket[-1] != user:
                        bucket.append(user)
            self._grams[k] = table
        return self._grams[k].get(tuple(items), [])


def _mean_embedding(base_model, users):
    if not users:
        return None
    rows = base_model.user_table.positions(users)
    return base_model.user_table.vectors[rows].astype(np.float64).mean(axis=0)


def rm_init(test_user_view, split, base_model, index=None):
    """Mean embedding of warm users whose first k items equal the cold user's initial items."""
    index = index or WarmSequenceIndex(split)
    return _mean_embedding(base_model, index.prefix_matches(test_user_view.initial_items))


def rm_cont(test_user_view, split, base_model, index=None):
    """Mean embedding of warm users whose history contains the initial items contiguously."""
    index = index or WarmSequenceIndex(split)
    return _mean_embedding(base_model, index.contiguous_matches(test_user_view.initial_items))


def partition_easy_hard(split, k, index=None):
    """Split the test users eligible at k (>= k+1 items) into easy and hard."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    index = index or WarmSequenceIndex(split)
    easy, hard = [], []
    for user in split.test_users:
        sequence = split.sequences[user]
        if len(sequence) < k + 1:
            continue
        (easy if index.prefix_matches(sequence[:k]) else hard).append(user)
    return SubsetPartition(k, tuple(easy), tuple(hard))


# ---------------------------------------------------------------------------
# Embedding methods
# ---------------------------------------------------------------------------

class VMRecMethod:
    """Predicted embeddings from the trained parameter generator."""

    name = "vmrec"

    def __init__(self, params, base_model, mode="deterministic", warm_rows=None, samples=1):
        self.params = params
        self.base_model = base_model
        self.mode = mode
        self.warm_rows = warm_rows
        self.samples = samples
        ids = base_model.user_table.ids
        self.warm_ids = ids if warm_rows is None else ids[np.asarray(warm_rows, dtype=np.int64)]
        self.weight_dumps = []

    def predict(self, view, rng):
        phi, weights = infer_embedding(view.initial_items, self.base_model, self.params, self.mode, rng,
                                       warm_rows=self.warm_rows, samples=self.samples, return_weights=True)
        self.weight_dumps.append(dump_weights(view.user_id, weights, self.warm_ids, self.mode))
        return phi, int(weights.support.sum())


class RuleBasedMethod:
    """RM_init or RM_cont; users without a match get no embedding."""

    def __init__(self, name, split, base_model):
        if name not in ("rm_init", "rm_cont"):
            raise ValueError(f"unknown rule-based method '{name}'")
        self.name = name
        self.split = split
        self.base_model = base_model
        self.index = WarmSequenceIndex(split)

    def predict(self, view, rng):
        if self.name == "rm_init":
            users = self.index.prefix_matches(view.initial_items)
        else:
            users = self.index.contiguous_matches(view.initial_items)
        return _mean_embedding(self.base_model, users), len(users)


class RandomEmbeddingMethod:
    """N(0, s^2) embeddings with s the per-dimension std of the warm table."""

    name = "random"

    def __init__(self, base_model):
        self.scale = base_model.user_table.vectors.astype(np.float64).std(axis=0)

    def predict(self, view, rng):
        return rng.generator.normal(0.0, 1.0, len(self.scale)) * self.scale, 0


class MeanWarmMethod:
    """Every cold user gets the mean warm embedding."""

    name = "mean"

    def __init__(self, base_model):
        self.embedding = base_model.user_table.vectors.astype(np.float64).mean(axis=0)
        self.size = len(base_model.user_table)

    def predict(self, view, rng):
        return self.embedding, self.size


def build_method(name, base_model, split, params=None, mode="deterministic", warm_rows=None, samples=1):
    if name == "vmrec":
        if params is None:
            raise EvaluationError("the vmrec method needs a trained generator")
        return VMRecMethod(params, base_model, mode, warm_rows, samples)
    if name in ("rm_init", "rm_cont"):
        return RuleBasedMethod(name, split, base_model)
    if name == "random":
        return RandomEmbeddingMethod(base_model)
    if name == "mean":
        return MeanWarmMethod(base_model)
    raise EvaluationError(f"unknown method '{name}', expected one of {METHODS}")


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------

def evaluate(method, base_model, split, k, n_neg=100, rng=None, users=None, role="test",
             cutoff=5, subset="all", config_digest=None):
    """
    Rank each holdout positive of every eligible user against n_neg negatives.

    Negatives are drawn per (user, positive position) so they do not depend on k
    or on the method. Users for whom the method returns no embedding are counted
    as absent and excluded.
    """
    rng = rng or Rng(0)
    candidates_users = split.users(role) if users is None else users
    eligible = [u for u in candidates_users if len(split.sequences[u]) >= k + 1]
    if not eligible:
        raise EvaluationError(f"no {role} users with at least {k + 1} items")

    records, absent = [], 0
    progress = tqdm(eligible, desc=f"{method.name} {k}-shot", disable=progress_disabled(), leave=False)
    for user in progress:
        view = kshot_view(split, user, k)
        embedding, support_size = method.predict(view, rng.substream("predict", user))
        if embedding is None:
            absent += 1
            continue
        ndcgs, mrrs = [], []
        for offset, positive in enumerate(view.holdout_items):
            negatives = sample_negatives(rng.substream("negatives", user, k + offset), user, split, n_neg)
            candidates = [positive] + negatives
            ranked = rank_candidates(candidates, base_model.score_items(embedding, candidates))
            ndcgs.append(ndcg_at_k(ranked, positive, cutoff))
            mrrs.append(mrr_at_k(ranked, positive, cutoff))
        records.append({
            "user_id": int(user),
            "k": k,
            "ndcg": float(np.mean(ndcgs)),
            "mrr": float(np.mean(mrrs)),
            "positives": len(ndcgs),
            "support_size": int(support_size),
        })

    if not records:
        raise EvaluationError(f"method {method.name} produced no embedding for any eligible user at k={k}")
    report = EvalReport(
        method=method.name,
        base_kind=base_model.kind,
        k=k,
        ndcg=float(np.mean([r["ndcg"] for r in records])),
        mrr=float(np.mean([r["mrr"] for r in records])),
        user_count=len(records),
        mean_support_size=float(np.mean([r["support_size"] for r in records])),
        records=records,
        seed=rng.seed,
        config_digest=config_digest,
        subset=subset,
        absent_users=absent,
        cutoff=cutoff,
    )
    logger.info("%s/%s %d-shot (%s): NDCG@%d=%.4f MRR@%d=%.4f over %d users (%d absent)",
                report.method, report.base_kind, k, subset, cutoff, report.ndcg, cutoff, report.mrr,
                report.user_count, absent)
    return report


def cross_model_eval(generator_trained_on_a, base_model_a, base_model_b, split, k, n_neg=100, rng=None,
                     mode="deterministic", warm_rows=None, config_digest=None):
    """
    Reuse a generator trained against base model A unchanged, with B's item
    embeddings for encoding and B's warm embeddings for the heads and the mapping.
    """
    if base_model_a.dim != base_model_b.dim or generator_trained_on_a.config.dim != base_model_b.dim:
        raise EvaluationError(
            f"dimension mismatch: generator/base A use {base_model_a.dim}, base B uses {base_model_b.dim}")
    if not np.array_equal(base_model_a.user_table.ids, base_model_b.user_table.ids):
        raise EvaluationError("base models do not share the warm-user index")
    method = VMRecMethod(generator_trained_on_a, base_model_b, mode, warm_rows)
    report = evaluate(method, base_model_b, split, k, n_neg, rng, config_digest=config_digest)
    report.method = f"vmrec[{base_model_a.kind}->{base_model_b.kind}]"
    return report
