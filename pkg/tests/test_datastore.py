import numpy as np
import pytest

from utils.errors import DataFormatError, SplitError
from utils.numerics import Rng
from utils.datastore import (FORMAT_PRESETS, EmbeddingTable, InteractionLog, kshot_view, load_checkpoint,
                             load_embeddings, load_interactions, load_split, sample_negatives, save_checkpoint,
                             save_embeddings, save_split, temporal_user_split)


def chain_log(n_users, length=3, first_item=1):
    """User u starts at time u; everyone interacts with the same items."""
    records = []
    for user in range(1, n_users + 1):
        for step in range(length):
            records.append((user, first_item + step, user * 10 + step))
    return InteractionLog.from_records(records)


def test_load_interactions_sorts_and_deduplicates(tmp_path):
    path = tmp_path / "log.tsv"
    path.write_text("2\t5\t20\n1\t3\t11\n1\t4\t10\n1\t4\t10\n\n2\t6\t20\n", encoding="utf-8")
    log = load_interactions(path)
    assert log.records() == [(1, 4, 10), (1, 3, 11), (2, 5, 20), (2, 6, 20)]
    assert log.stats["duplicates"] == 1
    assert log.stats["users"] == 2


def test_load_interactions_reads_movielens_layout(tmp_path):
    path = tmp_path / "u.data"
    path.write_text("196\t242\t3\t881250949\n186\t302\t3\t891717742\n", encoding="utf-8")
    log = load_interactions(path, FORMAT_PRESETS["movielens-100k"])
    assert log.records() == [(186, 302, 891717742), (196, 242, 881250949)]


def test_load_interactions_reports_malformed_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("1\t2\t3\n1\tx\t4\n", encoding="utf-8")
    with pytest.raises(DataFormatError) as info:
        load_interactions(path)
    assert info.value.line == 2


def test_load_interactions_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("", encoding="utf-8")
    with pytest.raises(DataFormatError):
        load_interactions(path)


def test_split_is_temporal_and_disjoint():
    split = temporal_user_split(chain_log(10))
    assert split.warm_users == tuple(range(1, 9))
    assert split.val_users == (9,)
    assert split.test_users == (10,)
    assert split.validate()


def test_split_removes_cold_items_then_refilters():
    records = [(u, item, u * 10 + item) for u in range(1, 19) for item in (1, 2, 3)]
    # test user 19 keeps two known items, test user 20 keeps one and is dropped
    records += [(19, 1, 190), (19, 2, 191), (19, 99, 192), (20, 1, 200), (20, 98, 201)]
    split = temporal_user_split(InteractionLog.from_records(records))
    assert split.val_users == (17, 18)
    assert split.test_users == (19,)
    assert split.sequences[19] == (1, 2)
    assert not {98, 99} & split.train_items
    assert split.stats["cold_items_removed"] == 2


def test_split_fails_when_a_role_is_empty():
    with pytest.raises(SplitError):
        temporal_user_split(chain_log(3))


def test_split_manifest_round_trip(tmp_path, toy_split):
    path = save_split(toy_split, tmp_path / "split.json")
    loaded = load_split(path)
    assert loaded == toy_split
    assert path.read_bytes() == save_split(loaded, tmp_path / "again.json").read_bytes()


def test_kshot_view_cuts_sequence(toy_split):
    user = toy_split.test_users[0]
    sequence = toy_split.sequences[user]
    view = kshot_view(toy_split, user, 2)
    assert view.initial_items == sequence[:2]
    assert view.holdout_items == sequence[2:]
    assert view.k == 2


def test_kshot_view_needs_k_plus_one_items():
    split = temporal_user_split(chain_log(10, length=2))
    with pytest.raises(SplitError):
        kshot_view(split, split.test_users[0], 2)
    with pytest.raises(SplitError):
        kshot_view(split, split.test_users[0], 0)


def test_negatives_avoid_user_history_and_are_reproducible(toy_split):
    user = toy_split.test_users[0]
    first = sample_negatives(Rng(5).substream("negatives", user, 1), user, toy_split, n=5)
    again = sample_negatives(Rng(5).substream("negatives", user, 1), user, toy_split, n=5)
    assert first == again
    assert len(set(first)) == 5
    assert not set(first) & set(toy_split.sequences[user])
    assert set(first) <= toy_split.train_items


def test_negatives_return_whole_pool_when_short(toy_split):
    user = toy_split.test_users[0]
    pool = toy_split.negative_pool(user)
    negatives = sample_negatives(Rng(0), user, toy_split, n=len(pool) + 50)
    assert sorted(negatives) == list(pool)


def test_embedding_table_round_trip(tmp_path):
    table = EmbeddingTable([3, 1, 2], np.arange(12, dtype=np.float32).reshape(3, 4))
    loaded = load_embeddings(save_embeddings(table, tmp_path / "t.vmeb"))
    assert loaded == table
    assert loaded.position(1) == 1
    assert loaded.vector(2).tolist() == [8.0, 9.0, 10.0, 11.0]


def test_embedding_file_layout(tmp_path):
    table = EmbeddingTable([7], np.ones((1, 2), dtype=np.float32))
    data = save_embeddings(table, tmp_path / "t.vmeb").read_bytes()
    assert data[:4] == b"VMEB"
    assert len(data) == 16 + 8 + 2 * 4


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b[:4] + b"\x02\x00\x00\x00" + b[8:], "unsupported version"),
])
def test_embedding_loader_rejects_corrupt_files(tmp_path, mutate, message):
    path = save_embeddings(EmbeddingTable([1, 2], np.ones((2, 3))), tmp_path / "t.vmeb")
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(DataFormatError, match=message):
        load_embeddings(path)


def test_embedding_table_rejects_non_finite():
    table = EmbeddingTable([1], [[np.nan, 1.0]])
    with pytest.raises(DataFormatError):
        table.validate()


def test_checkpoint_round_trip_keeps_order_and_sidecar(tmp_path):
    blocks = {"b.weight": np.arange(6).reshape(2, 3), "a.bias": np.array([1.5, -2.0])}
    path = save_checkpoint(blocks, tmp_path / "g.vmpg", architecture={"dim": 3})
    loaded, architecture = load_checkpoint(path)
    assert list(loaded) == ["b.weight", "a.bias"]
    assert loaded["b.weight"].shape == (2, 3)
    assert loaded["a.bias"].reshape(-1).tolist() == [1.5, -2.0]
    assert architecture == {"dim": 3}


def test_checkpoint_loader_rejects_truncation(tmp_path):
    path = save_checkpoint({"w": np.ones((4, 4))}, tmp_path / "g.vmpg")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataFormatError):
        load_checkpoint(path)
