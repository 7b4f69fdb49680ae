#!/usr/bin/env python3
"""
Datastore

This module holds everything that touches interaction data and artifacts on disk.
It provides utilities for:
1. Loading time-ordered implicit-feedback logs (user, item, timestamp)
2. Building the temporal warm/validation/test user split for cold-start evaluation
3. Cutting k-shot views and sampling evaluation negatives
4. Reading and writing embedding tables (VMEB), generator checkpoints (VMPG)
   and split manifests (JSON)
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from utils.errors import DataFormatError, SplitError

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"VMEB"
CHECKPOINT_MAGIC = b"VMPG"
FORMAT_VERSION = 1
SPLIT_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class FormatOptions:
    """Column layout of an interaction file. Column positions are 0-based."""

    delimiter: str = "\t"
    header: bool = False
    user_col: int = 0
    item_col: int = 1
    time_col: int = 2

    @property
    def n_columns(self):
        return max(self.user_col, self.item_col, self.time_col) + 1


FORMAT_PRESETS = {
    "default": FormatOptions(),
    # u.data: user, item, rating, timestamp; the rating is ignored
    "movielens-100k": FormatOptions(time_col=3),
}


# ---------------------------------------------------------------------------
# Interaction logs
# ---------------------------------------------------------------------------

@dataclass
class InteractionLog:
    """
    Implicit-feedback records sorted by user, then timestamp, then input order.

    frame has int64 columns user, item, timestamp.
    """

    frame: pd.DataFrame
    stats: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records, lines_read=None):
        frame = pd.DataFrame(list(records), columns=["user", "item", "timestamp"]).astype("int64")
        return cls._normalize(frame, lines_read if lines_read is not None else len(frame))

    @classmethod
    def _normalize(cls, frame, lines_read):
        frame = frame.reset_index(drop=True)
        frame["order"] = np.arange(len(frame), dtype=np.int64)
        deduped = frame.drop_duplicates(subset=["user", "item", "timestamp"], keep="first")
        ordered = deduped.sort_values(["user", "timestamp", "order"], kind="mergesort")
        ordered = ordered.drop(columns="order").reset_index(drop=True)
        stats = {
            "lines_read": int(lines_read),
            "records": int(len(ordered)),
            "duplicates": int(len(frame) - len(deduped)),
            "users": int(ordered["user"].nunique()),
            "items": int(ordered["item"].nunique()),
        }
        return cls(ordered, stats)

    def __len__(self):
        return len(self.frame)

    def records(self):
        return list(self.frame[["user", "item", "timestamp"]].itertuples(index=False, name=None))

    def sequences(self):
        """Per-user ordered item lists and first-interaction timestamps."""
        sequences, first_times = {}, {}
        for user, group in self.frame.groupby("user", sort=True):
            sequences[int(user)] = [int(i) for i in group["item"].to_numpy()]
            first_times[int(user)] = int(group["timestamp"].iloc[0])
        return sequences, first_times


def load_interactions(path, format_options=None):
    """
    Load an interaction file of user<TAB>item<TAB>timestamp lines.

    Raises DataFormatError on an empty file or a malformed line (with its line number).
    """
    options = format_options or FormatOptions()
    path = Path(path)
    if not path.exists():
        raise DataFormatError("interaction file not found", path=path)

    # one optional trailing column is tolerated and ignored
    names = list(range(options.n_columns + 1))
    skip = 1 if options.header else 0
    try:
        raw = pd.read_csv(
            path,
            sep=options.delimiter,
            header=None,
            names=names,
            skiprows=skip,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            index_col=False,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise DataFormatError("interaction file is empty", path=path)
    except pd.errors.ParserError as e:
        raise DataFormatError(f"malformed interaction file: {e}", path=path)

    blank = (raw.fillna("") == "").all(axis=1)
    raw = raw[~blank]
    if raw.empty:
        raise DataFormatError("interaction file is empty", path=path)

    columns = {}
    bad = pd.Series(False, index=raw.index)
    for name, col in (("user", options.user_col), ("item", options.item_col), ("timestamp", options.time_col)):
        values = pd.to_numeric(raw[col].str.strip(), errors="coerce")
        bad |= values.isna() | (values % 1 != 0)
        columns[name] = values
    if bad.any():
        first = int(bad[bad].index[0])
        raise DataFormatError("malformed line, expected user, item and integer timestamp",
                              path=path, line=first + 1 + skip)

    frame = pd.DataFrame({name: values.astype("int64") for name, values in columns.items()})
    log = InteractionLog._normalize(frame, lines_read=len(raw))
    logger.info(
        "Loaded %s: %d lines, %d records, %d duplicates dropped, %d users, %d items",
        path.name, log.stats["lines_read"], log.stats["records"], log.stats["duplicates"],
        log.stats["users"], log.stats["items"],
    )
    return log


# ---------------------------------------------------------------------------
# Temporal cold-start split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    """
    Warm (training), validation and test users with their ordered item sequences.

    warm_users is ordered by first-interaction time; that order defines the
    warm-user index used by the embedding tables and the generator.
    """

    warm_users: tuple
    val_users: tuple
    test_users: tuple
    sequences: dict
    first_times: dict
    train_items: frozenset
    stats: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_pools", {})
        object.__setattr__(self, "_train_item_array", np.array(sorted(self.train_items), dtype=np.int64))

    def sequence(self, user_id):
        try:
            return self.sequences[user_id]
        except KeyError:
            raise SplitError(f"user {user_id} is not part of the split")

    def users(self, role):
        return {"warm": self.warm_users, "val": self.val_users, "test": self.test_users}[role]

    def negative_pool(self, user_id):
        """Sorted train items the user never interacted with."""
        pool = self._pools.get(user_id)
        if pool is None:
            seen = np.array(sorted(set(self.sequence(user_id))), dtype=np.int64)
            pool = np.setdiff1d(self._train_item_array, seen, assume_unique=True)
            self._pools[user_id] = pool
        return pool

    def validate(self):
        """Check the split invariants; raises SplitError on the first violation."""
        warm, val, test = set(self.warm_users), set(self.val_users), set(self.test_users)
        if warm & val or warm & test or val & test:
            raise SplitError("warm, validation and test users overlap")
        for user in self.warm_users + self.val_users + self.test_users:
            if len(self.sequences[user]) < 2:
                raise SplitError(f"user {user} has fewer than 2 interactions")
        for user in self.val_users + self.test_users:
            outside = set(self.sequences[user]) - self.train_items
            if outside:
                raise SplitError(f"cold user {user} has items outside the training items: {sorted(outside)[:5]}")
        return True


def temporal_user_split(log, ratios=(8, 1, 1)):
    """
    Split users 8:1:1 by first-interaction time into warm / validation / test.

    Users are ordered by first-interaction time (ties by ascending id) and cut by
    ratio first; then users with < 2 interactions are dropped, items unseen among
    warm users are removed from validation/test sequences, and the >= 2 filter
    is applied again.
    """
    if len(log) == 0:
        raise SplitError("interaction log is empty")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise SplitError(f"split ratios must be three nonnegative numbers, got {ratios}")

    sequences, first_times = log.sequences()
    ordered = sorted(sequences, key=lambda u: (first_times[u], u))
    total = sum(ratios)
    n_warm = len(ordered) * ratios[0] // total
    n_val = len(ordered) * ratios[1] // total
    warm = ordered[:n_warm]
    val = ordered[n_warm:n_warm + n_val]
    test = ordered[n_warm + n_val:]

    def enough(users, seqs):
        return [u for u in users if len(seqs[u]) >= 2]

    warm = enough(warm, sequences)
    val = enough(val, sequences)
    test = enough(test, sequences)

    train_items = frozenset(item for u in warm for item in sequences[u])
    kept = {u: list(sequences[u]) for u in warm}
    removed = 0
    for user in val + test:
        filtered = [item for item in sequences[user] if item in train_items]
        removed += len(sequences[user]) - len(filtered)
        kept[user] = filtered
    val = enough(val, kept)
    test = enough(test, kept)

    for role, users in (("warm", warm), ("validation", val), ("test", test)):
        if not users:
            raise SplitError(f"the {role} user set is empty after filtering")

    keep = set(warm) | set(val) | set(test)
    split = DatasetSplit(
        warm_users=tuple(warm),
        val_users=tuple(val),
        test_users=tuple(test),
        sequences={u: tuple(kept[u]) for u in sorted(keep)},
        first_times={u: first_times[u] for u in sorted(keep)},
        train_items=train_items,
        stats={
            "users_before_filter": len(ordered),
            "warm_users": len(warm),
            "val_users": len(val),
            "test_users": len(test),
            "train_items": len(train_items),
            "cold_items_removed": removed,
        },
    )
    logger.info("Split %d users into %d warm / %d val / %d test (%d train items, %d cold-item events removed)",
                len(ordered), len(warm), len(val), len(test), len(train_items), removed)
    return split


@dataclass(frozen=True)
class KShotView:
    """A cold user's first k items and the held-out remainder."""

    user_id: int
    initial_items: tuple
    holdout_items: tuple

    @property
    def k(self):
        return len(self.initial_items)


def kshot_view(split, user_id, k):
    """Cut a user's sequence into the first k items and the rest; needs at least k+1 items."""
    if k < 1:
        raise SplitError(f"k must be at least 1, got {k}")
    sequence = split.sequence(user_id)
    if len(sequence) < k + 1:
        raise SplitError(f"user {user_id} has {len(sequence)} items, {k}-shot needs at least {k + 1}")
    return KShotView(user_id, tuple(sequence[:k]), tuple(sequence[k:]))


def sample_negatives(rng, user_id, split, n=100):
    """
    Draw n distinct train items the user never interacted with, uniformly without replacement.

    When the pool is smaller than n the whole pool is returned and the shortfall logged.
    """
    pool = split.negative_pool(user_id)
    if len(pool) < n:
        logger.warning("Negative pool for user %d has %d items, %d requested", user_id, len(pool), n)
        return [int(i) for i in pool]
    return [int(i) for i in rng.generator.choice(pool, size=n, replace=False)]


def save_split(split, path):
    """Write the split manifest as sorted, indented JSON (byte-stable across reruns)."""
    manifest = {
        "version": SPLIT_MANIFEST_VERSION,
        "warm_users": list(split.warm_users),
        "val_users": list(split.val_users),
        "test_users": list(split.test_users),
        "train_items": sorted(split.train_items),
        "sequences": {str(u): list(seq) for u, seq in split.sequences.items()},
        "first_times": {str(u): t for u, t in split.first_times.items()},
        "stats": split.stats,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_split(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"invalid split manifest: {e}", path=path)
    if manifest.get("version") != SPLIT_MANIFEST_VERSION:
        raise DataFormatError(f"unsupported split manifest version {manifest.get('version')}", path=path)
    split = DatasetSplit(
        warm_users=tuple(manifest["warm_users"]),
        val_users=tuple(manifest["val_users"]),
        test_users=tuple(manifest["test_users"]),
        sequences={int(u): tuple(seq) for u, seq in manifest["sequences"].items()},
        first_times={int(u): t for u, t in manifest["first_times"].items()},
        train_items=frozenset(manifest["train_items"]),
        stats=manifest.get("stats", {}),
    )
    split.validate()
    return split


# ---------------------------------------------------------------------------
# Embedding tables (VMEB)
# ---------------------------------------------------------------------------

class EmbeddingTable:
    """
    Id-indexed dense vectors. Row order is the id index: row i holds ids[i].
    Vectors are stored as float32, matching the on-disk format.
    """

    def __init__(self, ids, vectors):
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        self.vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"vectors must be ({len(self.ids)}, dim), got {self.vectors.shape}")
        self._positions = {int(i): row for row, i in enumerate(self.ids)}
        if len(self._positions) != len(self.ids):
            raise ValueError("embedding table ids must be unique")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, entity_id):
        return int(entity_id) in self._positions

    def position(self, entity_id):
        try:
            return self._positions[int(entity_id)]
        except KeyError:
            raise KeyError(f"id {entity_id} is not in the embedding table")

    def positions(self, entity_ids):
        return np.array([self.position(i) for i in entity_ids], dtype=np.int64)

    def vector(self, entity_id):
        return self.vectors[self.position(entity_id)]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingTable(self.ids[rows], self.vectors[rows])

    def validate(self):
        if self.dim < 1:
            raise DataFormatError("embedding table has dimension 0")
        if not np.isfinite(self.vectors).all():
            raise DataFormatError("embedding table holds non-finite values")
        return True

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingTable)
            and np.array_equal(self.ids, other.ids)
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def __repr__(self):
        return f"EmbeddingTable(rows={len(self)}, dim={self.dim})"


def _row_dtype(dim):
    return np.dtype([("id", "<u8"), ("vector", "<f4", (dim,))])


def save_embeddings(table, path):
    """Write VMEB: magic | u32 version | u32 n_rows | u32 dim | rows of (u64 id, dim x f32)."""
    table.validate()
    rows = np.zeros(len(table), dtype=_row_dtype(table.dim))
    rows["id"] = table.ids.astype(np.uint64)
    rows["vector"] = table.vectors
    header = np.array([FORMAT_VERSION, len(table), table.dim], dtype="<u4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(header.tobytes())
        f.write(rows.tobytes())
    return path


def _read_header(data, magic, path):
    if len(data) < 4:
        raise DataFormatError("truncated file", path=path, offset=len(data))
    if data[:4] != magic:
        raise DataFormatError("bad magic", path=path, offset=0)
    if len(data) < 8:
        raise DataFormatError("truncated file", path=path, offset=len(data))
    version = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported version {version}", path=path, offset=4)
    return version


def load_embeddings(path):
    path = Path(path)
    if not path.exists():
        raise DataFormatError("embedding table not found", path=path)
    data = path.read_bytes()
    _read_header(data, EMBEDDING_MAGIC, path)
    if len(data) < 16:
        raise DataFormatError("truncated file", path=path, offset=len(data))
    n_rows, dim = (int(v) for v in np.frombuffer(data, dtype="<u4", count=2, offset=8))
    if dim < 1:
        raise DataFormatError("embedding table has dimension 0", path=path, offset=12)
    row_dtype = _row_dtype(dim)
    expected = 16 + n_rows * row_dtype.itemsize
    if len(data) < expected:
        raise DataFormatError(f"truncated file, expected {expected} bytes", path=path, offset=len(data))
    if len(data) > expected:
        raise DataFormatError("trailing bytes after the last row", path=path, offset=expected)
    rows = np.frombuffer(data, dtype=row_dtype, count=n_rows, offset=16)
    return EmbeddingTable(rows["id"].astype(np.int64), rows["vector"].copy())


# ---------------------------------------------------------------------------
# Generator checkpoints (VMPG)
# ---------------------------------------------------------------------------

def save_checkpoint(blocks, path, architecture=None):
    """
    Write named f32 blocks as VMPG: magic | u32 version | u32 block_count |
    per block (u32 name_len, name, u32 rows, u32 cols, f32 data).

    architecture, when given, goes to a JSON sidecar next to the checkpoint.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array([FORMAT_VERSION, len(blocks)], dtype="<u4").tobytes())
        for name, value in blocks.items():
            value = np.asarray(value, dtype="<f4")
            matrix = value.reshape(value.shape[0], -1) if value.ndim >= 2 else value.reshape(1, -1)
            encoded = name.encode("utf-8")
            f.write(np.array([len(encoded)], dtype="<u4").tobytes())
            f.write(encoded)
            f.write(np.array(matrix.shape, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(matrix).tobytes())
    if architecture is not None:
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(architecture, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    """Read a VMPG checkpoint. Returns (ordered name -> 2D float32 array, architecture or None)."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError("generator checkpoint not found", path=path)
    data = path.read_bytes()
    _read_header(data, CHECKPOINT_MAGIC, path)
    if len(data) < 12:
        raise DataFormatError("truncated file", path=path, offset=len(data))
    count = int(np.frombuffer(data, dtype="<u4", count=1, offset=8)[0])
    offset = 12
    blocks = {}
    for _ in range(count):
        if len(data) < offset + 4:
            raise DataFormatError("truncated block header", path=path, offset=offset)
        name_len = int(np.frombuffer(data, dtype="<u4", count=1, offset=offset)[0])
        offset += 4
        if len(data) < offset + name_len + 8:
            raise DataFormatError("truncated block header", path=path, offset=offset)
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rows, cols = (int(v) for v in np.frombuffer(data, dtype="<u4", count=2, offset=offset))
        offset += 8
        size = rows * cols * 4
        if len(data) < offset + size:
            raise DataFormatError(f"truncated data for block '{name}'", path=path, offset=len(data))
        blocks[name] = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols).copy()
        offset += size
    if offset != len(data):
        raise DataFormatError("trailing bytes after the last block", path=path, offset=offset)

    sidecar = path.with_suffix(".json")
    architecture = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else None
    return blocks, architecture
