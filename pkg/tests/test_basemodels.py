import math

import numpy as np
import pytest
import torch
from scipy.spatial.distance import pdist

from utils.errors import ArtifactError
from utils.numerics import Rng
from utils.datastore import DatasetSplit, EmbeddingTable
from generation.basemodels import (BaseModel, BprConfig, auc_on_pairs, bpr_loss, cluster_distance_diagnostic,
                                   load_base_model, normalized_adjacency, propagate, save_base_model, score,
                                   train_base_model, train_bpr, train_lightgcn)


def small_config(**overrides):
    values = dict(dim=4, learning_rate=0.05, epochs=5, batch_size=64, patience=10, holdout_fraction=0.1, seed=3)
    values.update(overrides)
    return BprConfig(**values)


def test_bpr_loss_of_tied_scores_is_ln2():
    scores = torch.zeros(4)
    assert float(bpr_loss(scores, scores)) == pytest.approx(math.log(2.0))


def test_auc_counts_ties_as_half():
    users = np.ones((1, 2))
    items = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    auc = auc_on_pairs(users, items, np.array([0, 0]), np.array([0, 0]), np.array([1, 2]))
    assert auc == pytest.approx(0.75)


def test_normalized_adjacency_is_symmetric_degree_scaled():
    pairs = np.array([[0, 0], [0, 1], [1, 1]])
    adjacency = normalized_adjacency(2, 2, pairs).to_dense().numpy()
    assert np.allclose(adjacency, adjacency.T)
    # user 0 has degree 2, item 1 has degree 2
    assert adjacency[0, 3] == pytest.approx(0.5)
    assert adjacency[1, 3] == pytest.approx(1.0 / math.sqrt(2.0))
    assert adjacency[0, 1] == 0.0


def test_propagate_averages_layers():
    pairs = np.array([[0, 0]])
    adjacency = normalized_adjacency(1, 1, pairs)
    user, item = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
    same_user, same_item = propagate(user, item, adjacency, 0)
    assert torch.equal(same_user, user) and torch.equal(same_item, item)
    final_user, final_item = propagate(user, item, adjacency, 1)
    assert torch.allclose(final_user, torch.tensor([[0.5, 0.5]]))
    assert torch.allclose(final_item, torch.tensor([[0.5, 0.5]]))


def test_train_bpr_tables_follow_split_order(toy_split):
    model = train_bpr(toy_split, small_config())
    assert model.kind == "bpr"
    assert tuple(int(u) for u in model.user_table.ids) == toy_split.warm_users
    assert list(model.item_table.ids) == sorted(toy_split.train_items)
    assert model.dim == 4
    assert np.isfinite(model.user_table.vectors).all()


def test_train_bpr_learns_and_records_history(toy_split):
    model = train_bpr(toy_split, small_config())
    history = model.history
    assert 1 <= len(history) <= 5
    assert {"epoch", "train_loss", "train_auc", "holdout_loss"} <= set(history[0])
    assert history[-1]["train_loss"] < history[0]["train_loss"]
    assert 0.0 <= history[-1]["train_auc"] <= 1.0


def test_training_is_reproducible(toy_split):
    first = train_bpr(toy_split, small_config(epochs=2))
    second = train_bpr(toy_split, small_config(epochs=2))
    assert first.user_table == second.user_table
    assert first.item_table == second.item_table


def test_lightgcn_without_layers_matches_bpr(toy_split):
    bpr = train_bpr(toy_split, small_config(epochs=2))
    lightgcn = train_lightgcn(toy_split, small_config(epochs=2, layers=0))
    assert lightgcn.kind == "lightgcn"
    assert np.array_equal(bpr.user_table.vectors, lightgcn.user_table.vectors)


def test_lightgcn_trains_with_propagation(toy_split):
    model = train_base_model("lightgcn", toy_split, small_config(epochs=2, layers=2))
    assert model.metadata["layers"] == 2
    assert np.isfinite(model.item_table.vectors).all()


def test_unknown_kind_is_rejected(toy_split):
    with pytest.raises(ValueError):
        train_base_model("svd", toy_split, small_config())


def test_invalid_config_is_rejected():
    with pytest.raises(ValueError):
        BprConfig(dim=0).validate()
    with pytest.raises(ValueError):
        BprConfig(holdout_fraction=1.0).validate()


def test_score_is_dot_product():
    model = BaseModel("bpr", EmbeddingTable([1], [[1.0, 2.0]]), EmbeddingTable([10, 11], [[3.0, 4.0], [0.5, 0.0]]))
    assert score(model, [1.0, 2.0], 10) == pytest.approx(11.0)
    assert model.score_items([1.0, 2.0], [11, 10]).tolist() == pytest.approx([0.5, 11.0])
    with pytest.raises(KeyError):
        score(model, [1.0, 2.0], 99)


def test_mismatched_dimensions_are_rejected():
    with pytest.raises(ValueError):
        BaseModel("bpr", EmbeddingTable([1], [[1.0, 2.0]]), EmbeddingTable([1], [[1.0]]))


def test_cluster_distance_at_zero_shots_is_mean_pairwise_distance(toy_split, toy_base):
    results = cluster_distance_diagnostic(toy_base, toy_split, max_shots=3)
    assert [r["shot"] for r in results] == [0, 1, 2, 3]
    n = len(toy_split.warm_users)
    assert results[0]["clusters"] == 1
    assert results[0]["pairs"] == n * (n - 1) // 2
    expected = pdist(toy_base.user_table.vectors.astype(np.float64)).mean()
    assert results[0]["mean_distance"] == pytest.approx(expected)


def test_cluster_distance_groups_by_first_items():
    sequences = {1: (5, 6), 2: (5, 7), 3: (8, 6)}

    class Split:
        pass

    split = Split()
    split.sequences = sequences
    model = BaseModel("bpr", EmbeddingTable([1, 2, 3], [[0.0, 0.0], [3.0, 4.0], [9.0, 9.0]]),
                      EmbeddingTable([5], [[1.0, 1.0]]))
    results = cluster_distance_diagnostic(model, split, max_shots=2)
    assert results[1]["clusters"] == 1
    assert results[1]["mean_distance"] == pytest.approx(5.0)
    assert results[2]["mean_distance"] is None


def test_save_and_load_round_trip(tmp_path, toy_split, toy_base):
    save_base_model(toy_base, tmp_path / "bpr")
    loaded = load_base_model(tmp_path / "bpr", toy_split)
    assert loaded.kind == "bpr"
    assert loaded.user_table == toy_base.user_table
    assert loaded.item_table == toy_base.item_table
    assert (tmp_path / "bpr" / "metadata.txt").read_text(encoding="utf-8").startswith("dim: 8")


def test_load_detects_missing_and_stale_models(tmp_path, toy_split, toy_base):
    with pytest.raises(ArtifactError, match="train-base"):
        load_base_model(tmp_path / "nothing", toy_split)
    rows = np.arange(len(toy_base.user_table) - 1)
    stale = BaseModel("bpr", toy_base.user_table.subset(rows), toy_base.item_table, {"kind": "bpr"})
    save_base_model(stale, tmp_path / "stale")
    with pytest.raises(ArtifactError, match="stale"):
        load_base_model(tmp_path / "stale", toy_split)


def test_rng_stream_controls_initialization(toy_split):
    a = train_bpr(toy_split, small_config(epochs=1), Rng(1))
    b = train_bpr(toy_split, small_config(epochs=1), Rng(2))
    assert not np.array_equal(a.user_table.vectors, b.user_table.vectors)


def block_split():
    """Users 1, 2 only see items 1, 2; users 3, 4 only see items 3, 4."""
    sequences = {1: (1, 2), 2: (2, 1), 3: (3, 4), 4: (4, 3)}
    return DatasetSplit((1, 2, 3, 4), (), (), sequences, {u: 10 * u for u in sequences}, frozenset({1, 2, 3, 4}))


@pytest.mark.parametrize("trainer", [train_bpr, train_lightgcn])
def test_block_diagonal_data_scores_in_block_items_higher(trainer):
    config = small_config(epochs=200, holdout_fraction=0.0, layers=2)
    model = trainer(block_split(), config, Rng(5))
    scores = model.user_table.vectors.astype(np.float64) @ model.item_table.vectors.astype(np.float64).T
    for row, (own, other) in enumerate([((0, 1), (2, 3))] * 2 + [((2, 3), (0, 1))] * 2):
        assert scores[row, list(own)].min() > scores[row, list(other)].max()
