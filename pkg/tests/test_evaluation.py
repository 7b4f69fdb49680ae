import math

import numpy as np
import pytest

from utils.errors import EvaluationError
from utils.numerics import Rng
from utils.datastore import DatasetSplit, EmbeddingTable, kshot_view
from generation.basemodels import BaseModel
from generation.mapper import build_generator
from evaluation.evaluation import (METHODS, EvalReport, MeanWarmMethod, RandomEmbeddingMethod, RuleBasedMethod,
                                   SubsetPartition, WarmSequenceIndex, build_method, cross_model_eval, evaluate,
                                   mrr_at_k, ndcg_at_k, partition_easy_hard, rank_candidates, rm_cont, rm_init)

from conftest import make_base_model, tiny_generator_config


def hand_split():
    sequences = {
        1: (10, 11, 12),
        2: (10, 11, 13),
        3: (12, 10, 11, 20),
        4: (10, 11, 14),
        5: (20, 10, 12),
        6: (13, 12),
    }
    return DatasetSplit(
        warm_users=(1, 2, 3),
        val_users=(6,),
        test_users=(4, 5),
        sequences=sequences,
        first_times={u: u for u in sequences},
        train_items=frozenset({10, 11, 12, 13, 14, 20}),
    )


def hand_base():
    return BaseModel(
        "bpr",
        EmbeddingTable([1, 2, 3], [[1.0, 0.0], [3.0, 0.0], [0.0, 6.0]]),
        EmbeddingTable([10, 11, 12, 13, 14, 20], np.eye(6, 2)),
    )


class OracleMethod:
    """Embeds a user as the indicator of their held-out items (one-hot item table)."""

    name = "oracle"

    def __init__(self, items):
        self.items = list(items)

    def predict(self, view, rng):
        embedding = np.zeros(len(self.items))
        for item in view.holdout_items:
            embedding[self.items.index(item)] = 1.0
        return embedding, 1


def one_hot_base(split):
    items = sorted(split.train_items)
    users = list(split.warm_users)
    return BaseModel("bpr", EmbeddingTable(users, np.ones((len(users), len(items)))),
                     EmbeddingTable(items, np.eye(len(items))))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("rank", range(1, 8))
def test_metrics_by_rank(rank):
    ranked = [100 + i for i in range(10)]
    relevant = ranked[rank - 1]
    expected_ndcg = 1.0 / math.log2(rank + 1) if rank <= 5 else 0.0
    expected_mrr = 1.0 / rank if rank <= 5 else 0.0
    assert ndcg_at_k(ranked, relevant, 5) == pytest.approx(expected_ndcg)
    assert mrr_at_k(ranked, relevant, 5) == pytest.approx(expected_mrr)


def test_metric_examples():
    assert ndcg_at_k([7, 1, 2], 7) == 1.0
    assert ndcg_at_k([1, 2, 7], 7) == pytest.approx(0.5)
    assert mrr_at_k([1, 2, 7], 7) == pytest.approx(1 / 3)


def test_metrics_need_the_relevant_item():
    with pytest.raises(EvaluationError):
        ndcg_at_k([1, 2, 3], 9)
    with pytest.raises(EvaluationError):
        mrr_at_k([1, 2, 3], 9)


def test_ties_go_to_the_smaller_item_id():
    assert rank_candidates([5, 3, 9], [1.0, 1.0, 2.0]) == [9, 3, 5]


# ---------------------------------------------------------------------------
# Rule-based mappings and partition
# ---------------------------------------------------------------------------

def test_prefix_and_contiguous_matches():
    index = WarmSequenceIndex(hand_split())
    assert index.prefix_matches((10, 11)) == [1, 2]
    assert index.contiguous_matches((10, 11)) == [1, 2, 3]
    assert index.prefix_matches((20,)) == []
    assert index.contiguous_matches((11, 12, 13)) == []


def test_rm_init_averages_prefix_matches():
    split, base = hand_split(), hand_base()
    view = kshot_view(split, 4, 2)
    assert rm_init(view, split, base).tolist() == [2.0, 0.0]
    assert rm_cont(view, split, base).tolist() == pytest.approx([4 / 3, 2.0])


def test_rm_init_without_match_is_absent():
    split, base = hand_split(), hand_base()
    assert rm_init(kshot_view(split, 5, 1), split, base) is None


def test_partition_easy_hard():
    split = hand_split()
    partition = partition_easy_hard(split, 2)
    assert partition.easy_users == (4,)
    assert partition.hard_users == (5,)
    assert partition.easy_fraction == 0.5
    # only users with at least k+1 items are eligible
    assert partition_easy_hard(split, 3).users("all") == ()
    with pytest.raises(ValueError):
        partition_easy_hard(split, 0)


def test_subset_partition_users():
    partition = SubsetPartition(1, (1, 2), (3,))
    assert partition.users("easy") == (1, 2)
    assert partition.users("hard") == (3,)
    assert partition.users("all") == (1, 2, 3)
    assert SubsetPartition(1, (), ()).easy_fraction == 0.0


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------

def test_oracle_embedding_ranks_every_positive_first(toy_split):
    base = one_hot_base(toy_split)
    method = OracleMethod(base.item_table.ids.tolist())
    report = evaluate(method, base, toy_split, 1, n_neg=10, rng=Rng(0))
    assert report.ndcg == 1.0
    assert report.mrr == 1.0
    assert report.user_count == len([u for u in toy_split.test_users if len(toy_split.sequences[u]) >= 2])
    assert all(r["positives"] == len(toy_split.sequences[r["user_id"]]) - 1 for r in report.records)


def test_report_summary_and_reproducibility(toy_split, toy_base):
    method = MeanWarmMethod(toy_base)
    first = evaluate(method, toy_base, toy_split, 2, n_neg=10, rng=Rng(4), config_digest="abc")
    again = evaluate(method, toy_base, toy_split, 2, n_neg=10, rng=Rng(4), config_digest="abc")
    assert first.records == again.records
    summary = first.summary()
    assert summary["ndcg@5"] == first.ndcg
    assert summary["mrr@5"] == first.mrr
    assert summary["seed"] == 4
    assert summary["config_digest"] == "abc"
    assert summary["mean_support_size"] == len(toy_base.user_table)
    assert first.ndcg == pytest.approx(np.mean([r["ndcg"] for r in first.records]))


def test_users_without_embedding_are_counted_absent():
    split, base = hand_split(), hand_base()
    report = evaluate(RuleBasedMethod("rm_init", split, base), base, split, 1, n_neg=3, rng=Rng(0))
    assert report.user_count == 1
    assert report.absent_users == 1
    assert report.records[0]["user_id"] == 4


def test_no_eligible_users_is_an_error():
    split, base = hand_split(), hand_base()
    with pytest.raises(EvaluationError):
        evaluate(MeanWarmMethod(base), base, split, 3, n_neg=3, rng=Rng(0))


def test_method_without_any_embedding_is_an_error():
    split, base = hand_split(), hand_base()
    with pytest.raises(EvaluationError):
        evaluate(RuleBasedMethod("rm_init", split, base), base, split, 1, n_neg=3, rng=Rng(0), users=[5])


def test_random_embeddings_score_near_chance():
    g = np.random.default_rng(0)
    items = list(range(1, 151))
    warm = list(range(1, 51))
    sequences = {u: tuple(int(i) for i in g.choice(items, 5, replace=False)) for u in warm}
    test_users = list(range(1000, 1300))
    for u in test_users:
        sequences[u] = tuple(int(i) for i in g.choice(items, 11, replace=False))
    split = DatasetSplit(tuple(warm), (), tuple(test_users), sequences, {u: u for u in sequences}, frozenset(items))
    base = BaseModel("bpr", EmbeddingTable(warm, g.normal(size=(50, 8))),
                     EmbeddingTable(items, g.normal(size=(150, 8))))
    report = evaluate(RandomEmbeddingMethod(base), base, split, 1, n_neg=100, rng=Rng(1))
    chance = sum(1.0 / math.log2(r + 1) for r in range(1, 6)) / 101
    assert chance == pytest.approx(0.02919, abs=1e-5)
    assert report.ndcg == pytest.approx(chance, abs=0.012)


def test_random_method_matches_warm_scale(toy_base):
    method = RandomEmbeddingMethod(toy_base)
    draws = np.stack([method.predict(None, Rng(0).substream(i))[0] for i in range(2000)])
    assert np.allclose(draws.std(axis=0), toy_base.user_table.vectors.std(axis=0), rtol=0.1)


def test_vmrec_method_reports_support_size(toy_split, toy_base, tiny_generator):
    method = build_method("vmrec", toy_base, toy_split, params=tiny_generator)
    report = evaluate(method, toy_base, toy_split, 1, n_neg=10, rng=Rng(0))
    assert report.method == "vmrec"
    assert all(1 <= r["support_size"] <= len(toy_base.user_table) for r in report.records)


def test_build_method_names():
    split, base = hand_split(), hand_base()
    assert set(METHODS) == {"vmrec", "rm_init", "rm_cont", "random", "mean"}
    assert build_method("rm_cont", base, split).name == "rm_cont"
    with pytest.raises(EvaluationError):
        build_method("vmrec", base, split)
    with pytest.raises(EvaluationError):
        build_method("popular", base, split)


def test_eval_report_defaults():
    report = EvalReport("mean", "bpr", 1, 0.1, 0.2, 3, 5.0)
    assert report.summary()["subset"] == "all"
    assert report.summary()["users"] == 3


# ---------------------------------------------------------------------------
# Cross-model transfer
# ---------------------------------------------------------------------------

def test_cross_model_eval_uses_target_model(toy_split, toy_base, tiny_generator):
    other = make_base_model(toy_split, seed=99, kind="lightgcn")
    report = cross_model_eval(tiny_generator, toy_base, other, toy_split, 1, n_neg=10, rng=Rng(0))
    assert report.method == "vmrec[bpr->lightgcn]"
    assert report.base_kind == "lightgcn"


def test_cross_model_eval_rejects_dimension_mismatch(toy_split, toy_base):
    other = make_base_model(toy_split, dim=4, kind="lightgcn")
    generator = build_generator(tiny_generator_config(), Rng(0))
    with pytest.raises(EvaluationError, match="dimension"):
        cross_model_eval(generator, toy_base, other, toy_split, 1, n_neg=10, rng=Rng(0))


def test_cross_model_eval_rejects_different_warm_users(toy_split, toy_base, tiny_generator):
    other = BaseModel("lightgcn", toy_base.user_table.subset(np.arange(5)), toy_base.item_table)
    with pytest.raises(EvaluationError, match="warm-user"):
        cross_model_eval(tiny_generator, toy_base, other, toy_split, 1, n_neg=10, rng=Rng(0))
