#!/usr/bin/env python3
"""
Training

This script fits the parameter generator on warm users, whose frozen base-model
embeddings are the regression targets. It provides:
1. The KL terms of the objective (Bernoulli gate vs Bern(pi0), Gaussian slab vs N(0, 1))
2. The batch loss L = L_MSE + beta * L_KL with its exact gradients
3. The training loop: AdamW with decoupled weight decay, validation NDCG@5 at
   k=1 after every epoch, early stopping, and an independent run per learning rate
4. Distribution ablations (spike-and-slab, Gaussian, Gaussian + L1)
5. The beta and warm-proportion sensitivity sweeps

Usage:
    python training.py train SPLIT_MANIFEST MODEL_DIR OUT.vmpg
"""

import os
import sys
import copy
import json
import logging
import argparse
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr
from tqdm import tqdm

# Add the parent directory to the path so we can import common modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from utils.errors import NumericalError
from utils.numerics import Rng, differentiate, gradient_report, progress_disabled
from utils.datastore import load_split
from generation.mapper import (GAUSSIAN, SPIKE_SLAB, GeneratorConfig, NoiseDraw, ParameterGenerator,
                               build_generator, gaussian_weights, map_embedding, masked_softmax, pad_sequences,
                               reparameterize, save_generator, select_warm_rows, warm_matrix)
from evaluation.evaluation import VMRecMethod, evaluate

logger = logging.getLogger(__name__)

ABLATION_KINDS = ("spike_slab", "gaussian", "gaussian_l1")
DEFAULT_L1_GRID = (1e-20, 1e-16, 1e-12, 1e-8, 1e-4, 1e-2, 1.0, 10.0, 100.0)
DEFAULT_BETAS = (1e-12, 1e-10, 1e-6, 1e-2)
DEFAULT_PROPORTIONS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


@dataclass
class TrainConfig:
    """Generator training settings."""

    beta: float = 1e-10
    lr_grid: tuple = (0.1, 0.01, 0.001, 0.0001)
    weight_decay: float = 1e-5
    max_epochs: int = 50
    patience: int = 3
    batch_size: int = 64
    temperature: float = 0.5
    hard: bool = True
    prior_pi0: float = 1e-4
    warm_proportion: float = 1.0
    max_train_k: int = 3
    val_k: int = 1
    n_neg: int = 100
    mse_form: str = "norm"
    kind: str = SPIKE_SLAB
    l1_lambda: float = 0.0
    heads: int = 4
    attn_dim: int = None
    mlp_hidden: tuple = (128, 128)
    seed: int = 2024

    def __post_init__(self):
        self.lr_grid = tuple(float(lr) for lr in self.lr_grid)
        self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)

    def validate(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.warm_proportion <= 1.0:
            raise ValueError(f"warm_proportion must be in (0, 1], got {self.warm_proportion}")
        if not 0.0 < self.prior_pi0 < 1.0:
            raise ValueError(f"prior_pi0 must be in (0, 1), got {self.prior_pi0}")
        if not self.lr_grid or min(self.lr_grid) <= 0:
            raise ValueError("lr_grid needs at least one positive learning rate")
        if self.mse_form not in ("norm", "squared"):
            raise ValueError(f"mse_form must be 'norm' or 'squared', got {self.mse_form}")
        if self.kind not in (SPIKE_SLAB, GAUSSIAN):
            raise ValueError(f"unknown distribution kind '{self.kind}'")
        if self.l1_lambda < 0:
            raise ValueError(f"l1_lambda must be >= 0, got {self.l1_lambda}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.max_train_k < 1:
            raise ValueError("max_epochs, batch_size and max_train_k must be >= 1")
        return self

    def generator_config(self, dim):
        return GeneratorConfig(dim=dim, heads=self.heads, attn_dim=self.attn_dim or dim,
                               mlp_hidden=self.mlp_hidden, kind=self.kind, temperature=self.temperature)


@dataclass
class TrainState:
    """One learning-rate run: params, their AdamW moments, and the early-stopping counters."""

    params: torch.nn.Module
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    best_metric: float = float("-inf")
    stale: int = 0
    best_epoch: int = 0
    best_state: dict = None
    best_mean_pi: float = None

    def moments(self):
        """(exp_avg, exp_avg_sq) per parameter name, once the optimizer has stepped."""
        names = {id(p): n for n, p in self.params.named_parameters()}
        return {names[id(p)]: (s["exp_avg"], s["exp_avg_sq"])
                for p, s in self.optimizer.state.items() if "exp_avg" in s}


@dataclass
class TrainResult:
    params: torch.nn.Module
    lr: float
    best_val_ndcg: float
    best_epoch: int
    history: list = field(default_factory=list)
    best_mean_pi: float = None
    warm_rows: np.ndarray = None
    config: TrainConfig = None


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def kl_bernoulli(pi, pi0, logit=None):
    """
    Sum over the last axis of KL(Bern(pi) || Bern(pi0)).

    Computed from logits when given so saturated gates stay finite.
    """
    pi = torch.as_tensor(pi)
    if logit is None:
        logit = torch.log(pi) - torch.log1p(-pi)
    log_pi0 = float(np.log(pi0))
    log_not_pi0 = float(np.log1p(-pi0))
    on = F.logsigmoid(logit) - log_pi0
    off = F.logsigmoid(-logit) - log_not_pi0
    return (torch.sigmoid(logit) * on + torch.sigmoid(-logit) * off).sum(-1)


def kl_gaussian(mu, sigma):
    """Sum over the last axis of KL(N(mu, sigma^2) || N(0, 1))."""
    mu, sigma = torch.as_tensor(mu), torch.as_tensor(sigma)
    return 0.5 * (sigma.pow(2) + mu.pow(2) - 1.0 - 2.0 * torch.log(sigma)).sum(-1)


@dataclass
class VibBatch:
    """A fixed batch: padded initial items, self positions in the warm subset, targets, noise."""

    users: list
    items: torch.Tensor
    mask: torch.Tensor
    self_index: torch.Tensor
    targets: torch.Tensor
    noise: NoiseDraw


def draw_train_k(rng, sequence_length, max_k=3):
    return min(int(rng.generator.integers(1, max_k + 1)), sequence_length)


def build_batch(users, split, base_model, warm_rows, rng, epoch, max_k=3, dtype=torch.float32):
    """
    Assemble one batch. Each user's k is drawn uniformly from {1..max_k} (capped
    by history length) and the noise is fixed per (epoch, user).
    """
    row_of = {int(base_model.user_table.ids[r]): pos for pos, r in enumerate(warm_rows)}
    sequences, targets, self_index, draws = [], [], [], []
    for user in users:
        sequence = split.sequences[user]
        k = draw_train_k(rng.substream("k", epoch, user), len(sequence), max_k)
        sequences.append(list(sequence[:k]))
        targets.append(base_model.user_table.vector(user))
        self_index.append(row_of.get(int(user), -1))
        draws.append(NoiseDraw.draw(rng.substream("noise", epoch, user), len(warm_rows), dtype))
    items, mask = pad_sequences(sequences, base_model.item_table, dtype)
    return VibBatch(
        users=list(users),
        items=items,
        mask=mask,
        self_index=torch.tensor(self_index, dtype=torch.long),
        targets=torch.from_numpy(np.stack(targets)).to(dtype),
        noise=NoiseDraw.stack(draws),
    )


def vib_closure(batch, warm, config, stats=None):
    """
    Loss closure for numerics.differentiate: params -> (loss, intermediates).

    With stats given, the batch's loss terms and support diagnostics are written into it.
    """

    def closure(params):
        trace = OrderedDict()
        dist = params(batch.items, warm, batch.mask, trace)
        if config.kind == SPIKE_SLAB:
            w_tilde = reparameterize(dist, config.temperature, noise=batch.noise, hard=config.hard)
        else:
            w_tilde = gaussian_weights(dist, noise=batch.noise)
        trace["w_tilde"] = w_tilde
        weights = masked_softmax(w_tilde, "train", batch.self_index, fallback_scores=dist.pi,
                                 dense=(config.kind == GAUSSIAN))
        phi_hat = map_embedding(weights, warm)
        trace["phi_hat"] = phi_hat

        residual = phi_hat - batch.targets
        if config.mse_form == "norm":
            loss_mse = torch.linalg.vector_norm(residual, dim=-1).mean()
        else:
            loss_mse = residual.pow(2).sum(-1).mean()
        kl = kl_gaussian(dist.mu, dist.sigma)
        if config.kind == SPIKE_SLAB:
            kl = kl + kl_bernoulli(dist.pi, config.prior_pi0, dist.logit)
        loss_kl = kl.mean()
        loss = loss_mse + config.beta * loss_kl
        if config.l1_lambda:
            loss = loss + config.l1_lambda * w_tilde.abs().sum(-1).mean()
        trace["loss_mse"] = loss_mse
        trace["loss_kl"] = loss_kl

        if stats is not None:
            stats["loss_mse"] = float(loss_mse.detach())
            stats["loss_kl"] = float(loss_kl.detach())
            stats["mean_pi"] = float(dist.pi.detach().mean())
            stats["support_size"] = weights.support.sum(-1).double().tolist()
            stats["empty_support"] = int(weights.fallback.sum())
        return loss, trace

    return closure


def vib_loss(batch, params, warm, config, stats=None):
    """Batch loss and its gradients with the batch's noise held fixed. Returns (loss, ParamGradients)."""
    return differentiate(vib_closure(batch, warm, config, stats), params)


def toy_gradient_report(rng, n_warm=5, dim=8, k=2, beta=1e-2, h=1e-3, order=4, std=0.1):
    """
    Finite-difference check of the full batch loss on a small float64 instance.

    Every warm user is also a batch user (self-masked), with k random initial
    items, and every parameter entry is drawn from N(0, std^2). Gates are
    relaxed (hard=False); straight-through gradients are not finite-difference exact.

    At std=0.1 the attention gradients sit near 1e-9, below what a second-order
    difference at h=1e-5 resolves in float64, so the default is a fourth-order
    stencil at h=1e-3. The ReLU sign pattern is reported as the regime.
    """
    g = rng.generator
    warm = torch.from_numpy(g.normal(0.0, 1.0, (n_warm, dim)))
    config = TrainConfig(beta=beta, hard=False, heads=2, attn_dim=4, mlp_hidden=(8,))
    params = ParameterGenerator(config.generator_config(dim)).to(torch.float64)
    params.reset_parameters(rng.substream("params"), std=std)
    noise = NoiseDraw.stack([NoiseDraw.draw(rng.substream("noise", u), n_warm, torch.float64) for u in range(n_warm)])
    batch = VibBatch(
        users=list(range(n_warm)),
        items=torch.from_numpy(g.normal(0.0, 1.0, (n_warm, k, dim))),
        mask=torch.ones(n_warm, k, dtype=torch.bool),
        self_index=torch.arange(n_warm),
        targets=warm.clone(),
        noise=noise,
    )
    loss_closure = vib_closure(batch, warm, config)

    def closure(p):
        loss, trace = loss_closure(p)
        trace["regime"] = torch.cat([(trace[name] > 0).reshape(-1) for name in ("o_pi", "o_mu", "o_sigma")])
        return loss, trace

    return gradient_report(closure, params, h, order)


def make_optimizer(params, lr, weight_decay):
    """AdamW: p <- p * (1 - lr * wd) before the Adam step."""
    return torch.optim.AdamW(params.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=weight_decay)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def mean_pi(params, base_model, split, users, k, warm):
    """Mean gate probability over users' k-shot distributions (absent for Gaussian generators)."""
    if params.config.kind != SPIKE_SLAB:
        return None
    eligible = [u for u in users if len(split.sequences[u]) >= k + 1]
    if not eligible:
        return None
    dtype = next(params.parameters()).dtype
    items, mask = pad_sequences([list(split.sequences[u][:k]) for u in eligible], base_model.item_table, dtype)
    with torch.no_grad():
        dist = params(items, warm.to(dtype), mask)
    return float(dist.pi.mean())


def make_validator(base_model, split, config, warm_rows, rng):
    """Validation NDCG@5 at config.val_k, deterministic inference; also returns mean pi."""
    warm = warm_matrix(base_model, warm_rows)
    stream = rng.substream("validation")

    def validate(params, epoch):
        method = VMRecMethod(params, base_model, "deterministic", warm_rows)
        report = evaluate(method, base_model, split, config.val_k, config.n_neg, stream, role="val")
        return report.ndcg, mean_pi(params, base_model, split, split.val_users, config.val_k, warm)

    return validate


def _run_epochs(state, users, split, base_model, warm, warm_rows, config, rng, lr, validator, history,
                on_epoch=None):
    n_batches = -(-len(users) // config.batch_size)
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        order = rng.substream("order", epoch).generator.permutation(len(users))
        shuffled = [users[i] for i in order]
        mse, kl, supports, empty = [], [], [], 0
        progress = tqdm(range(n_batches), desc=f"lr={lr:g} epoch {epoch}",
                        disable=progress_disabled(), leave=False)
        state.params.train()
        for b in progress:
            batch_users = shuffled[b * config.batch_size:(b + 1) * config.batch_size]
            batch = build_batch(batch_users, split, base_model, warm_rows, rng, epoch, config.max_train_k)
            stats = {}
            try:
                _, grads = vib_loss(batch, state.params, warm, config, stats)
            except NumericalError as e:
                raise NumericalError(f"epoch {epoch}: {e.reason}", e.intermediate)
            state.optimizer.zero_grad(set_to_none=True)
            grads.assign(state.params)
            state.optimizer.step()
            mse.append(stats["loss_mse"])
            kl.append(stats["loss_kl"])
            supports.extend(stats["support_size"])
            empty += stats["empty_support"]

        state.params.eval()
        val_ndcg, val_pi = validator(state.params, epoch)
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss_mse": float(np.mean(mse)),
            "loss_kl": float(np.mean(kl)),
            "val_ndcg5": float(val_ndcg),
            "mean_pi": val_pi,
            "mean_support_size": float(np.mean(supports)),
            "empty_support_count": empty,
        }
        history.append(record)
        if on_epoch:
            on_epoch(record)
        if empty:
            logger.warning("Epoch %d: %d users fell back to a single warm user (empty support)", epoch, empty)
        logger.info("lr=%g epoch %d: mse=%.4f kl=%.2f val NDCG@5=%.4f", lr, epoch, record["loss_mse"],
                    record["loss_kl"], val_ndcg)

        if val_ndcg > state.best_metric:
            state.best_metric = float(val_ndcg)
            state.best_epoch = epoch
            state.best_state = copy.deepcopy(state.params.state_dict())
            state.best_mean_pi = val_pi
            state.stale = 0
        else:
            state.stale += 1
            if state.stale >= config.patience:
                logger.info("Early stop at epoch %d (best epoch %d)", epoch, state.best_epoch)
                break
    return state


def train_mapper(split, base_model, config, rng=None, validator=None, on_epoch=None):
    """
    Fit the generator once per learning rate in the grid and keep the run with the
    best validation NDCG@5. Runs that go non-finite are dropped; if every run
    diverges, NumericalError is raised.
    """
    config.validate()
    rng = rng or Rng(config.seed)
    warm_rows = select_warm_rows(len(base_model.user_table), config.warm_proportion, rng)
    warm = warm_matrix(base_model, warm_rows)
    validator = validator or make_validator(base_model, split, config, warm_rows, rng)
    users = list(split.warm_users)
    logger.info("Training generator on %d warm users with %d warm embeddings (%s, beta=%g)",
                len(users), len(warm_rows), config.kind, config.beta)

    best, history, failures = None, [], []
    for lr in config.lr_grid:
        params = build_generator(config.generator_config(base_model.dim), rng.substream("params"))
        state = TrainState(params, make_optimizer(params, lr, config.weight_decay))
        try:
            _run_epochs(state, users, split, base_model, warm, warm_rows, config, rng.substream("lr", str(lr)),
                        lr, validator, history, on_epoch)
        except NumericalError as e:
            logger.warning("lr=%g diverged: %s", lr, e)
            failures.append(lr)
            continue
        params.load_state_dict(state.best_state)
        result = TrainResult(params, lr, state.best_metric, state.best_epoch, best_mean_pi=state.best_mean_pi,
                             warm_rows=warm_rows, config=config)
        if best is None or result.best_val_ndcg > best.best_val_ndcg:
            best = result

    if best is None:
        raise NumericalError(f"every learning rate diverged: {list(failures)}", "loss")
    best.history = history
    logger.info("Best lr=%g at epoch %d with validation NDCG@5=%.4f", best.lr, best.best_epoch, best.best_val_ndcg)
    return best


def ablate_distribution(kind, split, base_model, config, rng=None, l1_grid=DEFAULT_L1_GRID, validator=None):
    """
    Train one distribution variant. gaussian_l1 searches the L1 weight over
    l1_grid and keeps the best validation run.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind '{kind}', expected one of {ABLATION_KINDS}")
    if kind == "spike_slab":
        return train_mapper(split, base_model, replace(config, kind=SPIKE_SLAB, l1_lambda=0.0), rng, validator)
    if kind == "gaussian":
        return train_mapper(split, base_model, replace(config, kind=GAUSSIAN, l1_lambda=0.0), rng, validator)

    best = None
    for l1 in l1_grid:
        result = train_mapper(split, base_model, replace(config, kind=GAUSSIAN, l1_lambda=float(l1)), rng,
                              validator)
        logger.info("L1 weight %g: validation NDCG@5=%.4f", l1, result.best_val_ndcg)
        if best is None or result.best_val_ndcg > best.best_val_ndcg:
            best = result
    return best


# ---------------------------------------------------------------------------
# Sensitivity sweeps
# ---------------------------------------------------------------------------

def _shot_scores(result, base_model, split, shots, n_neg, rng):
    scores = {}
    for k in shots:
        method = VMRecMethod(result.params, base_model, "deterministic", result.warm_rows)
        scores[k] = evaluate(method, base_model, split, k, n_neg, rng.substream("test", k)).ndcg
    return scores


def sweep_beta(split, base_model, config, rng=None, betas=DEFAULT_BETAS, shots=(1, 2, 3)):
    """
    Train at each beta and report best validation NDCG@5, mean pi at the best
    epoch, and k-shot test NDCG@5. The Spearman correlation of mean pi against
    beta is returned alongside; sparsity pressure means it is <= 0.
    """
    rng = rng or Rng(config.seed)
    rows = []
    for beta in betas:
        result = train_mapper(split, base_model, replace(config, beta=float(beta)), rng)
        rows.append({
            "beta": float(beta),
            "lr": result.lr,
            "best_val_ndcg5": result.best_val_ndcg,
            "mean_pi": result.best_mean_pi,
            "test_ndcg5": _shot_scores(result, base_model, split, shots, config.n_neg, rng),
        })
    pis = [r["mean_pi"] for r in rows]
    rho = None
    if len(rows) > 1 and None not in pis:
        rho = float(spearmanr([r["beta"] for r in rows], pis).correlation)
        if np.isnan(rho):
            rho = None
    if rho is not None and rho > 0:
        logger.warning("Mean pi increases with beta (Spearman rho=%.3f)", rho)
    return rows, rho


def sweep_proportion(split, base_model, config, rng=None, proportions=DEFAULT_PROPORTIONS, shots=(1, 2, 3)):
    """Train with a random warm-embedding subset at each proportion."""
    rng = rng or Rng(config.seed)
    rows = []
    for proportion in proportions:
        result = train_mapper(split, base_model, replace(config, warm_proportion=float(proportion)), rng)
        rows.append({
            "proportion": float(proportion),
            "warm_embeddings": len(result.warm_rows),
            "lr": result.lr,
            "best_val_ndcg5": result.best_val_ndcg,
            "mean_pi": result.best_mean_pi,
            "test_ndcg5": _shot_scores(result, base_model, split, shots, config.n_neg, rng),
        })
    return rows


def save_training_log(history, path):
    """One JSON line per epoch."""
    with open(path, "w", encoding="utf-8") as f:
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def main():
    parser = argparse.ArgumentParser(description="Train the VM-Rec parameter generator")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    train_parser = subparsers.add_parser("train", help="Train on a split and a base model")
    train_parser.add_argument("split", help="Path to split manifest JSON")
    train_parser.add_argument("model", help="Base model directory")
    train_parser.add_argument("out", help="Checkpoint path (.vmpg)")
    train_parser.add_argument("--beta", type=float, default=TrainConfig.beta, help="KL weight")
    train_parser.add_argument("--seed", type=int, default=TrainConfig.seed, help="Random seed")

    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)

    if args.command == "train":
        from generation.basemodels import load_base_model
        split = load_split(args.split)
        model = load_base_model(args.model, split)
        config = TrainConfig(beta=args.beta, seed=args.seed)
        result = train_mapper(split, model, config, Rng(args.seed))
        save_generator(result.params, args.out, result.warm_rows, {"lr": result.lr, "best_epoch": result.best_epoch})
        print(f"Generator saved to: {args.out} (validation NDCG@5 {result.best_val_ndcg:.4f})")
    else:
        parser.print_help()


if __name__ == "__main__":
    main()
