#!/usr/bin/env python3
"""
Base Models

This script trains the pre-trained recommender whose embeddings stay frozen
for everything downstream. It provides:
1. BPR matrix factorization (pairwise ranking on implicit feedback)
2. LightGCN (symmetric-normalized propagation, layer-averaged embeddings)
3. Dot-product scoring of stored or predicted user embeddings
4. The in-cluster distance diagnostic over warm embeddings grouped by first items
5. Saving/loading the user and item tables plus a text metadata file

Usage:
    python basemodels.py train bpr SPLIT_MANIFEST OUT_DIR
    python basemodels.py diagnose MODEL_DIR SPLIT_MANIFEST
"""

import os
import sys
import json
import logging
import argparse
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from scipy.spatial.distance import pdist
from tqdm import tqdm

# Add the parent directory to the path so we can import common modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from utils.errors import ArtifactError, DataFormatError, NumericalError
from utils.numerics import Rng, progress_disabled
from utils.datastore import EmbeddingTable, load_embeddings, load_split, save_embeddings

logger = logging.getLogger(__name__)

BASE_KINDS = ("bpr", "lightgcn")


@dataclass
class BprConfig:
    """Base-model training settings. Defaults stand in for the usual toolkit defaults."""

    dim: int = 64
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 2048
    negatives_per_positive: int = 1
    l2_reg: float = 1e-6
    layers: int = 2
    patience: int = 10
    holdout_fraction: float = 0.05
    seed: int = 2024

    def validate(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.negatives_per_positive < 1 or self.epochs < 1:
            raise ValueError("epochs, batch_size and negatives_per_positive must be >= 1")
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError(f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")
        return self


@dataclass
class BaseModel:
    """Frozen dot-product recommender: user table (warm users) and item table (train items)."""

    kind: str
    user_table: EmbeddingTable
    item_table: EmbeddingTable
    metadata: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.user_table.dim != self.item_table.dim:
            raise ValueError(f"user dim {self.user_table.dim} != item dim {self.item_table.dim}")

    @property
    def dim(self):
        return self.user_table.dim

    def score_items(self, embedding, item_ids):
        """Scores of many items for one user embedding (float64)."""
        rows = self.item_table.positions(item_ids)
        return self.item_table.vectors[rows].astype(np.float64) @ np.asarray(embedding, dtype=np.float64)


def score(model, user_embedding, item_id):
    """Dot product of a (stored or predicted) user embedding with an item embedding."""
    if item_id not in model.item_table:
        raise KeyError(f"item {item_id} is not in the base model's item table")
    item = model.item_table.vector(item_id).astype(np.float64)
    return float(np.dot(np.asarray(user_embedding, dtype=np.float64), item))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _interaction_pairs(split):
    """Unique (user row, item row) pairs over warm users, in warm order."""
    items = sorted(split.train_items)
    item_rows = {item: row for row, item in enumerate(items)}
    pairs, positives = [], []
    for user_row, user in enumerate(split.warm_users):
        seen = sorted({item_rows[i] for i in split.sequences[user]})
        positives.append(set(seen))
        pairs.extend((user_row, item_row) for item_row in seen)
    return items, np.array(pairs, dtype=np.int64), positives


def _sample_negatives(rng, users, positives, n_items):
    """One uniformly drawn non-positive item per user row (rejection sampling)."""
    negatives = rng.generator.integers(0, n_items, size=len(users))
    clash = np.array([neg in positives[u] for u, neg in zip(users, negatives)], dtype=bool)
    while clash.any():
        redraw = rng.generator.integers(0, n_items, size=int(clash.sum()))
        negatives[clash] = redraw
        idx = np.flatnonzero(clash)
        clash[idx] = [neg in positives[users[i]] for i, neg in zip(idx, redraw)]
    return negatives


def normalized_adjacency(n_users, n_items, pairs):
    """D^-1/2 A D^-1/2 of the user-item bipartite graph, as a torch sparse tensor."""
    size = n_users + n_items
    rows = np.concatenate([pairs[:, 0], pairs[:, 1] + n_users])
    cols = np.concatenate([pairs[:, 1] + n_users, pairs[:, 0]])
    adjacency = sp.coo_matrix((np.ones(len(rows), dtype=np.float64), (rows, cols)), shape=(size, size)).tocsr()
    degree = np.asarray(adjacency.sum(axis=1)).reshape(-1)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(degree > 0, 1.0 / np.sqrt(degree), 0.0)
    scaling = sp.diags(inv_sqrt)
    norm = (scaling @ adjacency @ scaling).tocoo()
    indices = torch.from_numpy(np.vstack([norm.row, norm.col]).astype(np.int64))
    values = torch.from_numpy(norm.data.astype(np.float32))
    return torch.sparse_coo_tensor(indices, values, (size, size)).coalesce()


def propagate(user_weight, item_weight, adjacency, layers):
    """Layer-averaged LightGCN embeddings; layers=0 returns the inputs unchanged."""
    if layers == 0:
        return user_weight, item_weight
    ego = torch.cat([user_weight, item_weight], dim=0)
    stack = [ego]
    for _ in range(layers):
        ego = torch.sparse.mm(adjacency, ego)
        stack.append(ego)
    final = torch.stack(stack, dim=1).mean(dim=1)
    return torch.split(final, [user_weight.shape[0], item_weight.shape[0]], dim=0)


def bpr_loss(pos_scores, neg_scores):
    """Mean of -ln sigmoid(pos - neg)."""
    return F.softplus(neg_scores - pos_scores).mean()


def auc_on_pairs(user_vectors, item_vectors, users, positives, negatives):
    """Fraction of (user, positive, negative) triples ranked correctly; ties count 1/2."""
    users_v = user_vectors[users]
    pos = np.einsum("ij,ij->i", users_v, item_vectors[positives])
    neg = np.einsum("ij,ij->i", users_v, item_vectors[negatives])
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


def _train_pairwise(split, config, rng, kind, layers):
    config.validate()
    items, pairs, positives = _interaction_pairs(split)
    n_users, n_items = len(split.warm_users), len(items)

    order = rng.substream("holdout").generator.permutation(len(pairs))
    n_holdout = int(len(pairs) * config.holdout_fraction)
    holdout, train = pairs[order[:n_holdout]], pairs[order[n_holdout:]]
    train = train[np.lexsort((train[:, 1], train[:, 0]))]
    holdout_neg = _sample_negatives(rng.substream("holdout_negatives"), holdout[:, 0], positives, n_items)

    init = rng.substream("init")
    user_weight = torch.nn.Parameter(torch.from_numpy(
        init.substream("user").generator.normal(0.0, 0.01, (n_users, config.dim)).astype(np.float32)))
    item_weight = torch.nn.Parameter(torch.from_numpy(
        init.substream("item").generator.normal(0.0, 0.01, (n_items, config.dim)).astype(np.float32)))
    adjacency = normalized_adjacency(n_users, n_items, train) if layers > 0 else None
    optimizer = torch.optim.Adam([user_weight, item_weight], lr=config.learning_rate)

    best_loss, best_state, stale, history = np.inf, None, 0, []
    progress = tqdm(range(1, config.epochs + 1), desc=f"train {kind}", disable=progress_disabled(), leave=False)
    for epoch in progress:
        epoch_rng = rng.substream("epoch", epoch)
        batch_pairs = np.repeat(train, config.negatives_per_positive, axis=0)
        batch_pairs = batch_pairs[epoch_rng.substream("order").generator.permutation(len(batch_pairs))]
        batch_neg = _sample_negatives(epoch_rng.substream("negatives"), batch_pairs[:, 0], positives, n_items)

        total = 0.0
        for start in range(0, len(batch_pairs), config.batch_size):
            chunk = slice(start, start + config.batch_size)
            users = torch.from_numpy(batch_pairs[chunk, 0])
            pos = torch.from_numpy(batch_pairs[chunk, 1])
            neg = torch.from_numpy(batch_neg[chunk])
            final_users, final_items = propagate(user_weight, item_weight, adjacency, layers)
            u, i, j = final_users[users], final_items[pos], final_items[neg]
            loss = bpr_loss((u * i).sum(-1), (u * j).sum(-1))
            ego = user_weight[users].pow(2).sum() + item_weight[pos].pow(2).sum() + item_weight[neg].pow(2).sum()
            loss = loss + config.l2_reg * 0.5 * ego / len(users)
            if not torch.isfinite(loss):
                raise NumericalError(f"{kind} loss diverged at epoch {epoch}", "bpr_loss")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(users)

        with torch.no_grad():
            final_users, final_items = propagate(user_weight, item_weight, adjacency, layers)
            user_np, item_np = final_users.numpy(), final_items.numpy()
        record = {"epoch": epoch, "train_loss": total / max(1, len(batch_pairs))}
        sample = train[: min(len(train), 20000)]
        sample_neg = _sample_negatives(epoch_rng.substream("auc"), sample[:, 0], positives, n_items)
        record["train_auc"] = auc_on_pairs(user_np, item_np, sample[:, 0], sample[:, 1], sample_neg)
        if n_holdout:
            u, i, j = (torch.from_numpy(a)
                       for a in (user_np[holdout[:, 0]], item_np[holdout[:, 1]], item_np[holdout_neg]))
            record["holdout_loss"] = float(bpr_loss((u * i).sum(-1), (u * j).sum(-1)))
        history.append(record)
        logger.debug("%s epoch %d: %s", kind, epoch, record)

        monitored = record.get("holdout_loss", record["train_loss"])
        if monitored < best_loss - 1e-7:
            best_loss, best_state, stale = monitored, (user_np.copy(), item_np.copy()), 0
        else:
            stale += 1
            if n_holdout and stale >= config.patience:
                logger.info("%s early stop at epoch %d (best held-out loss %.4f)", kind, epoch, best_loss)
                break

    user_np, item_np = best_state
    metadata = {"kind": kind, "dim": config.dim, "seed": rng.seed, "epochs": len(history),
                "layers": layers, "learning_rate": config.learning_rate}
    return BaseModel(
        kind=kind,
        user_table=EmbeddingTable(np.array(split.warm_users, dtype=np.int64), user_np),
        item_table=EmbeddingTable(np.array(items, dtype=np.int64), item_np),
        metadata=metadata,
        history=history,
    )


def train_bpr(split, config, rng=None):
    """Train BPR-MF on warm users' interactions; embeddings start at N(0, 0.01^2)."""
    rng = rng or Rng(config.seed)
    return _train_pairwise(split, config, rng, "bpr", layers=0)


def train_lightgcn(split, config, rng=None):
    """Train LightGCN; the exported tables are the propagated, layer-averaged embeddings."""
    rng = rng or Rng(config.seed)
    return _train_pairwise(split, config, rng, "lightgcn", layers=config.layers)


def train_base_model(kind, split, config, rng=None):
    if kind == "bpr":
        return train_bpr(split, config, rng)
    if kind == "lightgcn":
        return train_lightgcn(split, config, rng)
    raise ValueError(f"unknown base model kind '{kind}', expected one of {BASE_KINDS}")


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def cluster_distance_diagnostic(model, split, max_shots=3):
    """
    Mean in-cluster Euclidean distance of warm embeddings, clustering users by their first s items.

    For each s in [0, max_shots] returns {shot, mean_distance, clusters, pairs};
    mean_distance is None when no cluster has two or more members.
    """
    vectors = model.user_table.vectors.astype(np.float64)
    results = []
    for shot in range(max_shots + 1):
        clusters = {}
        for row, user in enumerate(model.user_table.ids):
            sequence = split.sequences[int(user)]
            if len(sequence) >= shot:
                clusters.setdefault(tuple(sequence[:shot]), []).append(row)
        total, pairs, used = 0.0, 0, 0
        for members in clusters.values():
            if len(members) < 2:
                continue
            distances = pdist(vectors[members])
            total += float(distances.sum())
            pairs += len(distances)
            used += 1
        results.append({
            "shot": shot,
            "mean_distance": total / pairs if pairs else None,
            "clusters": used,
            "pairs": pairs,
        })

    present = [r["mean_distance"] for r in results if r["mean_distance"] is not None]
    if any(later > earlier for earlier, later in zip(present, present[1:])):
        logger.warning("In-cluster distance is not monotone non-increasing in the number of shots: %s",
                       [None if v is None else round(v, 4) for v in (r["mean_distance"] for r in results)])
    return results


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def save_base_model(model, directory):
    """Write users.vmeb, items.vmeb and a 'Key: value' metadata.txt under directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_embeddings(model.user_table, directory / "users.vmeb")
    save_embeddings(model.item_table, directory / "items.vmeb")
    with open(directory / "metadata.txt", "w", encoding="utf-8") as f:
        for key in sorted(model.metadata):
            f.write(f"{key}: {model.metadata[key]}\n")
    with open(directory / "history.jsonl", "w", encoding="utf-8") as f:
        for record in model.history:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return directory


def load_base_model(directory, split=None):
    """Load a saved base model; with a split, check its warm users and items still match."""
    directory = Path(directory)
    metadata_path = directory / "metadata.txt"
    if not metadata_path.exists():
        raise ArtifactError(f"no base model at {directory}", producer="train-base")
    metadata = {}
    for line in metadata_path.read_text(encoding="utf-8").splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            metadata[key.strip()] = value.strip()
    try:
        users = load_embeddings(directory / "users.vmeb")
        items = load_embeddings(directory / "items.vmeb")
    except DataFormatError as e:
        raise ArtifactError(f"unreadable base model tables: {e}", producer="train-base")
    model = BaseModel(metadata.get("kind", "bpr"), users, items, metadata)
    if split is not None:
        if tuple(int(u) for u in users.ids) != tuple(split.warm_users):
            raise ArtifactError("base model warm users do not match the current split (stale artifact)",
                                producer="train-base")
        if set(int(i) for i in items.ids) != set(split.train_items):
            raise ArtifactError("base model items do not match the current split (stale artifact)",
                                producer="train-base")
    return model


def main():
    parser = argparse.ArgumentParser(description="Train and inspect base recommenders")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    train_parser = subparsers.add_parser("train", help="Train a base model on a split manifest")
    train_parser.add_argument("kind", choices=BASE_KINDS, help="Base model kind")
    train_parser.add_argument("split", help="Path to split manifest JSON")
    train_parser.add_argument("out", help="Output directory for the tables")
    train_parser.add_argument("--epochs", type=int, default=BprConfig.epochs, help="Training epochs")
    train_parser.add_argument("--seed", type=int, default=BprConfig.seed, help="Random seed")

    diagnose_parser = subparsers.add_parser("diagnose", help="In-cluster distance by number of shots")
    diagnose_parser.add_argument("model", help="Base model directory")
    diagnose_parser.add_argument("split", help="Path to split manifest JSON")
    diagnose_parser.add_argument("--max-shots", type=int, default=3, help="Largest shot count")

    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)

    if args.command == "train":
        split = load_split(args.split)
        config = BprConfig(epochs=args.epochs, seed=args.seed)
        model = train_base_model(args.kind, split, config, Rng(args.seed))
        save_base_model(model, args.out)
        print(f"Base model saved to: {args.out}")
    elif args.command == "diagnose":
        split = load_split(args.split)
        model = load_base_model(args.model, split)
        print("\n=== In-Cluster Distance by Shots ===\n")
        for row in cluster_distance_diagnostic(model, split, args.max_shots):
            value = "absent" if row["mean_distance"] is None else f"{row['mean_distance']:.4f}"
            print(f"{row['shot']}-shot: {value} ({row['clusters']} clusters, {row['pairs']} pairs)")
    else:
        parser.print_help()


if __name__ == "__main__":
    main()
