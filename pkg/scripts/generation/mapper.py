#!/usr/bin/env python3
"""
Mapper

This script holds the parameter generator that maps a cold user's first k
interactions to a predicted embedding. The pipeline is:
1. Encode the initial items with one multi-head self-attention layer, mean-pooled
2. Generate a spike-and-slab distribution (pi, mu, sigma) over every warm user
3. Reparameterize with Gumbel-Softmax gates and Gaussian noise
4. Apply the masked softmax (self-masked during training)
5. Map: weighted sum of warm user embeddings

Usage:
    python mapper.py probe K N D D_PRIME
    python mapper.py infer CHECKPOINT MODEL_DIR ITEM [ITEM ...]
"""

import os
import sys
import math
import logging
import argparse
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.flop_counter import FlopCounterMode

# Add the parent directory to the path so we can import common modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from utils.errors import ArtifactError, DataFormatError, NumericalError
from utils.numerics import Rng, first_non_finite, sample_gaussian, sample_gumbel
from utils.datastore import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

SPIKE_SLAB = "spike_slab"
GAUSSIAN = "gaussian"
DISTRIBUTION_KINDS = (SPIKE_SLAB, GAUSSIAN)
SIGMA_FLOOR = 1e-6


@dataclass
class GeneratorConfig:
    """Architecture of the parameter generator."""

    dim: int = 64
    heads: int = 4
    attn_dim: int = 64
    mlp_hidden: tuple = (128, 128)
    kind: str = SPIKE_SLAB
    temperature: float = 0.5

    def __post_init__(self):
        self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)
        if self.attn_dim % self.heads:
            raise ValueError(f"attn_dim {self.attn_dim} is not a multiple of heads {self.heads}")
        if self.kind not in DISTRIBUTION_KINDS:
            raise ValueError(f"unknown distribution kind '{self.kind}'")
        if not self.mlp_hidden:
            raise ValueError("mlp_hidden needs at least one layer")

    def to_dict(self):
        data = asdict(self)
        data["mlp_hidden"] = list(self.mlp_hidden)
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class SpikeSlabParams:
    """Per-warm-user distribution parameters; tensors of shape (N,) or (B, N)."""

    pi: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    logit: torch.Tensor = None

    def __post_init__(self):
        if self.logit is None:
            self.logit = torch.log(self.pi) - torch.log1p(-self.pi)


@dataclass
class MapperWeights:
    """Masked-softmax output: weights are exactly 0 off the support."""

    weights: torch.Tensor
    support: torch.Tensor
    fallback: torch.Tensor = None

    @property
    def support_size(self):
        return self.support.sum(-1)


@dataclass
class EncoderOutput:
    h: torch.Tensor


@dataclass
class NoiseDraw:
    """Fixed noise for one reparameterization: eps ~ N(0,1), two Gumbel(0,1) draws per gate."""

    eps: torch.Tensor
    gumbel_on: torch.Tensor
    gumbel_off: torch.Tensor

    @classmethod
    def draw(cls, rng, n, dtype=torch.float32):
        return cls(
            torch.from_numpy(sample_gaussian(rng.substream("eps"), n)).to(dtype),
            torch.from_numpy(sample_gumbel(rng.substream("gumbel_on"), n)).to(dtype),
            torch.from_numpy(sample_gumbel(rng.substream("gumbel_off"), n)).to(dtype),
        )

    @classmethod
    def stack(cls, draws):
        return cls(*(torch.stack([getattr(d, f) for d in draws]) for f in ("eps", "gumbel_on", "gumbel_off")))


@dataclass
class CostProbe:
    """Measured forward-pass FLOPs per stage."""

    projection: int
    attention: int
    pooling: int
    heads: int
    mapping: int
    sizes: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.projection + self.attention + self.pooling + self.heads + self.mapping


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

def _mlp(in_features, hidden):
    layers = []
    for width in hidden:
        layers += [nn.Linear(in_features, width), nn.ReLU()]
        in_features = width
    return nn.Sequential(*layers)


class InteractionEncoder(nn.Module):
    """One multi-head self-attention layer over the initial items, mean-pooled to length d."""

    def __init__(self, dim, heads, attn_dim):
        super().__init__()
        self.heads = heads
        self.head_dim = attn_dim // heads
        self.query = nn.Linear(dim, attn_dim)
        # no key bias: softmax over keys is invariant to it
        self.key = nn.Linear(dim, attn_dim, bias=False)
        self.value = nn.Linear(dim, attn_dim)
        self.output = nn.Linear(attn_dim, dim)

    def _split(self, x):
        batch, length, _ = x.shape
        return x.view(batch, length, self.heads, self.head_dim).transpose(1, 2)

    def project(self, x):
        return self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))

    def attend(self, q, k, v, mask=None):
        # q, k, v: (B, heads, K, head_dim); mask: (B, K) True on real items
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        context = torch.softmax(scores, dim=-1) @ v
        batch, _, length, _ = context.shape
        return context.transpose(1, 2).reshape(batch, length, self.heads * self.head_dim)

    def pool(self, context, mask=None):
        out = self.output(context)
        if mask is None:
            return out.mean(dim=1)
        weights = mask.to(out.dtype).unsqueeze(-1)
        return (out * weights).sum(dim=1) / weights.sum(dim=1)

    def forward(self, x, mask=None):
        q, k, v = self.project(x)
        return self.pool(self.attend(q, k, v, mask), mask)


class DistributionHeads(nn.Module):
    """
    MLP1_pi/mu/sigma over concat(h, phi_i); the pi features are shared into the mu and sigma outputs.
    """

    def __init__(self, dim, hidden):
        super().__init__()
        width = hidden[-1]
        self.pi_body = _mlp(2 * dim, hidden)
        self.mu_body = _mlp(2 * dim, hidden)
        self.sigma_body = _mlp(2 * dim, hidden)
        self.pi_out = nn.Linear(width, 1)
        self.mu_out = nn.Linear(2 * width, 1)
        self.sigma_out = nn.Linear(2 * width, 1)

    def forward(self, h, warm, trace=None):
        # h: (B, d), warm: (N, d) -> each output (B, N)
        batch, n = h.shape[0], warm.shape[0]
        x = torch.cat([h[:, None, :].expand(batch, n, -1), warm[None, :, :].expand(batch, n, -1)], dim=-1)
        o_pi = self.pi_body(x)
        o_mu = self.mu_body(x)
        o_sigma = self.sigma_body(x)
        logit = self.pi_out(o_pi).squeeze(-1)
        mu = self.mu_out(torch.cat([o_pi, o_mu], dim=-1)).squeeze(-1)
        sigma = F.softplus(self.sigma_out(torch.cat([o_pi, o_sigma], dim=-1)).squeeze(-1)) + SIGMA_FLOOR
        if trace is not None:
            trace.update(o_pi=o_pi, o_mu=o_mu, o_sigma=o_sigma, pi_logit=logit, mu=mu, sigma=sigma)
        return SpikeSlabParams(torch.sigmoid(logit), mu, sigma, logit)


class ParameterGenerator(nn.Module):
    """All trainable generator parameters: the attention encoder and the distribution heads."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or GeneratorConfig()
        self.encoder = InteractionEncoder(self.config.dim, self.config.heads, self.config.attn_dim)
        self.heads = DistributionHeads(self.config.dim, self.config.mlp_hidden)

    def encode(self, items, mask=None, trace=None):
        h = self.encoder(items, mask)
        if trace is not None:
            trace["h"] = h
        return h

    def distribution(self, h, warm, trace=None):
        return self.heads(h, warm, trace)

    def forward(self, items, warm, mask=None, trace=None):
        return self.distribution(self.encode(items, mask, trace), warm, trace)

    def reset_parameters(self, rng, std=None):
        """
        Deterministic init from an Rng: Glorot-uniform weights, zero biases,
        or N(0, std^2) for every entry when std is given.
        """
        with torch.no_grad():
            for name, param in self.named_parameters():
                stream = rng.substream("init", name)
                if std is not None:
                    values = stream.generator.normal(0.0, std, tuple(param.shape))
                elif param.dim() >= 2:
                    bound = math.sqrt(6.0 / (param.shape[0] + param.shape[1]))
                    values = stream.generator.uniform(-bound, bound, tuple(param.shape))
                else:
                    values = np.zeros(tuple(param.shape))
                param.copy_(torch.from_numpy(np.asarray(values)).to(param.dtype))
        return self


def build_generator(config, rng, dtype=torch.float32):
    return ParameterGenerator(config).to(dtype).reset_parameters(rng)


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def item_matrix(item_table, items, dtype=torch.float32):
    missing = [i for i in items if i not in item_table]
    if missing:
        raise KeyError(f"items not in the item table: {missing[:5]}")
    return torch.from_numpy(item_table.vectors[item_table.positions(items)]).to(dtype)


def pad_sequences(sequences, item_table, dtype=torch.float32):
    """Stack variable-length item sequences into (B, Kmax, d) plus a (B, Kmax) validity mask."""
    longest = max(len(s) for s in sequences)
    batch = torch.zeros(len(sequences), longest, item_table.dim, dtype=dtype)
    mask = torch.zeros(len(sequences), longest, dtype=torch.bool)
    for row, sequence in enumerate(sequences):
        batch[row, :len(sequence)] = item_matrix(item_table, sequence, dtype)
        mask[row, :len(sequence)] = True
    return batch, mask


def encode_interactions(initial_items, item_table, params, K=None):
    """Encode one user's initial items into h of length d."""
    if not initial_items:
        raise ValueError("encode_interactions needs at least one item (K >= 1)")
    if K is not None and K != len(initial_items):
        raise ValueError(f"K={K} but {len(initial_items)} items were given")
    dtype = next(params.parameters()).dtype
    x = item_matrix(item_table, list(initial_items), dtype).unsqueeze(0)
    return EncoderOutput(params.encode(x)[0])


def generate_distribution(h, warm_table_subset, params):
    """Spike-and-slab parameters for every warm embedding in the subset."""
    h = h.h if isinstance(h, EncoderOutput) else h
    warm = warm_table_subset if isinstance(warm_table_subset, torch.Tensor) else \
        torch.from_numpy(warm_table_subset.vectors).to(h.dtype)
    if warm.shape[0] == 0:
        raise ValueError("warm subset is empty")
    trace = {}
    dist = params.distribution(h.reshape(1, -1), warm, trace)
    bad = first_non_finite(trace)
    if bad:
        raise NumericalError("non-finite distribution parameters", bad)
    return SpikeSlabParams(dist.pi[0], dist.mu[0], dist.sigma[0], dist.logit[0])


def reparameterize(dist, temperature, rng=None, hard=True, noise=None):
    """
    w~_i = s_i * (mu_i + eps_i * sigma_i) with s_i a two-class Gumbel-Softmax gate.

    With hard=True the forward gate is exactly 0 or 1 and gradients flow through
    the relaxed gate (straight-through). Pass either rng or fixed noise.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if noise is None:
        noise = NoiseDraw.draw(rng, dist.mu.numel(), dist.mu.dtype)
    shape = dist.mu.shape
    eps, g_on, g_off = (t.reshape(shape).to(dist.mu.dtype) for t in (noise.eps, noise.gumbel_on, noise.gumbel_off))
    # softmax over logits (log pi, log(1 - pi)), "on" coordinate
    relaxed = torch.sigmoid((dist.logit + g_on - g_off) / temperature)
    if hard:
        gate = (relaxed > 0.5).to(relaxed.dtype) + (relaxed - relaxed.detach())
    else:
        gate = relaxed
    return gate * (dist.mu + eps * dist.sigma)


def gaussian_weights(dist, rng=None, noise=None):
    """Gaussian-only ablation: w~_i = mu_i + eps_i * sigma_i, no gate."""
    if noise is None:
        noise = NoiseDraw.draw(rng, dist.mu.numel(), dist.mu.dtype)
    return dist.mu + noise.eps.reshape(dist.mu.shape).to(dist.mu.dtype) * dist.sigma


def masked_softmax(w_tilde, mode="train", self_index=None, fallback_scores=None, dense=False):
    """
    Softmax over the support {i : w~_i != 0}, minus self_index in train mode.

    dense=True keeps every index in the support (Gaussian ablation). An empty
    support falls back to argmax of fallback_scores (pi) with weight 1.
    self_index may be an int or a (B,) tensor; -1 or None means no self mask.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode}")
    w = torch.as_tensor(w_tilde)
    squeeze = w.dim() == 1
    w2 = w.reshape(-1, w.shape[-1])
    rows = torch.arange(w2.shape[0])

    support = torch.ones_like(w2, dtype=torch.bool) if dense else (w2 != 0)
    self_rows = None
    if mode == "train" and self_index is not None:
        index = torch.as_tensor(self_index).reshape(-1).expand(w2.shape[0])
        self_rows = index >= 0
        support[rows[self_rows], index[self_rows]] = False

    empty = ~support.any(dim=-1)
    if empty.any():
        scores = w2.abs() if fallback_scores is None else torch.as_tensor(fallback_scores).reshape(w2.shape)
        scores = scores.detach().clone()
        if self_rows is not None:
            scores[rows[self_rows], index[self_rows]] = float("-inf")
        chosen = torch.zeros_like(support)
        chosen[rows, scores.argmax(dim=-1)] = True
        support = torch.where(empty[:, None], chosen, support)
        logger.debug("Empty support in %d of %d rows; fell back to argmax", int(empty.sum()), w2.shape[0])

    logits = torch.where(support, w2, torch.full_like(w2, float("-inf")))
    weights = torch.softmax(logits, dim=-1)
    if squeeze:
        return MapperWeights(weights[0], support[0], empty[0])
    return MapperWeights(weights, support, empty)


def map_embedding(w, warm_table):
    """phi_hat = sum_i w_i * phi_i over the warm table (a convex combination)."""
    weights = w.weights if isinstance(w, MapperWeights) else torch.as_tensor(w)
    warm = warm_table if isinstance(warm_table, torch.Tensor) else torch.from_numpy(warm_table.vectors)
    return weights @ warm.to(weights.dtype)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def select_warm_rows(n_warm, proportion, rng):
    """Uniform random subset of warm-table rows at the given proportion (sorted)."""
    if not 0.0 < proportion <= 1.0:
        raise ValueError(f"proportion must be in (0, 1], got {proportion}")
    if proportion >= 1.0:
        return np.arange(n_warm, dtype=np.int64)
    size = max(1, int(round(n_warm * proportion)))
    return np.sort(rng.substream("warm_subset").generator.choice(n_warm, size=size, replace=False)).astype(np.int64)


def warm_matrix(base_model, warm_rows=None, dtype=torch.float32):
    vectors = base_model.user_table.vectors
    if warm_rows is not None:
        vectors = vectors[np.asarray(warm_rows, dtype=np.int64)]
    return torch.from_numpy(np.ascontiguousarray(vectors)).to(dtype)


def inference_weights(dist, mode, kind=SPIKE_SLAB, rng=None):
    """
    Pre-softmax weights at inference. deterministic: gate 1[pi > 0.5], value mu;
    stochastic: gate ~ Bernoulli(pi), value ~ N(mu, sigma^2).
    """
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"inference mode must be 'deterministic' or 'stochastic', got {mode}")
    if mode == "deterministic":
        value = dist.mu
    else:
        value = dist.mu + dist.sigma * torch.from_numpy(
            sample_gaussian(rng.substream("eps"), dist.mu.numel())).reshape(dist.mu.shape).to(dist.mu.dtype)
    if kind == GAUSSIAN:
        return value
    if mode == "deterministic":
        gate = dist.pi > 0.5
    else:
        u = torch.from_numpy(rng.substream("bernoulli").uniform(dist.pi.numel())).reshape(dist.pi.shape)
        gate = u.to(dist.pi.dtype) < dist.pi
    return torch.where(gate, value, torch.zeros_like(value))


def infer_embedding(initial_items, base_model, params, mode="deterministic", rng=None,
                    warm_rows=None, samples=1, return_weights=False):
    """
    Predict a cold user's embedding from their initial items. No self mask applies.

    Stochastic mode averages `samples` draws (default one). With return_weights
    the MapperWeights of the last draw are returned too.
    """
    if mode == "stochastic" and rng is None:
        raise ValueError("stochastic inference needs an rng")
    kind = params.config.kind
    dtype = next(params.parameters()).dtype
    with torch.no_grad():
        warm = warm_matrix(base_model, warm_rows, dtype)
        h = encode_interactions(initial_items, base_model.item_table, params)
        dist = generate_distribution(h, warm, params)
        draws = samples if mode == "stochastic" else 1
        total = torch.zeros(warm.shape[1], dtype=dtype)
        for s in range(draws):
            stream = rng.substream("sample", s) if rng is not None else None
            w_tilde = inference_weights(dist, mode, kind, stream)
            weights = masked_softmax(w_tilde, "infer", fallback_scores=dist.pi, dense=(kind == GAUSSIAN))
            total += map_embedding(weights, warm)
        phi = (total / draws).double().numpy()
    if return_weights:
        return phi, weights
    return phi


def dump_weights(user_id, weights, warm_ids, mode, top=10):
    """Diagnostic record {user_id, support_size, top_weights, mode} for one inference."""
    values = weights.weights.detach().double().numpy()
    order = np.argsort(-values, kind="stable")[:top]
    return {
        "user_id": int(user_id),
        "support_size": int(weights.support.sum()),
        "top_weights": [[int(warm_ids[i]), float(values[i])] for i in order if values[i] > 0],
        "mode": mode,
    }


# ---------------------------------------------------------------------------
# Cost probe
# ---------------------------------------------------------------------------

def _flops(fn, *args):
    with FlopCounterMode(display=False) as counter:
        out = fn(*args)
    return out, int(counter.get_total_flops())


def mapping_cost_probe(K, N, d, d_prime, heads=4):
    """
    Measure one forward pass's FLOPs per stage with a single-hidden-layer head of
    width d_prime: projections and pooling are linear in K, attention scores are
    quadratic in K, heads and mapping are linear in N.
    """
    if min(K, N, d, d_prime) < 1:
        raise ValueError("all sizes must be >= 1")
    heads = min(heads, d)
    attn_dim = heads * math.ceil(d / heads)
    generator = ParameterGenerator(GeneratorConfig(dim=d, heads=heads, attn_dim=attn_dim, mlp_hidden=(d_prime,)))
    x = torch.zeros(1, K, d)
    warm = torch.zeros(N, d)
    with torch.no_grad():
        (q, k, v), projection = _flops(generator.encoder.project, x)
        context, attention = _flops(generator.encoder.attend, q, k, v)
        h, pooling = _flops(generator.encoder.pool, context)
        dist, head_flops = _flops(generator.heads, h, warm)
        weights = masked_softmax(dist.mu, "infer", dense=True)
        _, mapping = _flops(map_embedding, weights, warm)
    return CostProbe(projection, attention, pooling, head_flops, mapping,
                     sizes={"K": K, "N": N, "d": d, "d_prime": d_prime})


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_generator(params, path, warm_rows=None, extra=None):
    """Write the VMPG checkpoint and its JSON sidecar (architecture + warm subset)."""
    blocks = {name: t.detach().cpu().float().numpy() for name, t in params.state_dict().items()}
    architecture = {"generator": params.config.to_dict()}
    if warm_rows is not None:
        architecture["warm_rows"] = [int(r) for r in warm_rows]
    if extra:
        architecture.update(extra)
    return save_checkpoint(blocks, path, architecture)


def load_generator(path, dtype=torch.float32):
    """Rebuild a ParameterGenerator from a checkpoint. Returns (params, warm_rows or None, sidecar)."""
    try:
        blocks, architecture = load_checkpoint(path)
    except DataFormatError as e:
        raise ArtifactError(f"unreadable generator checkpoint: {e}", producer="train-mapper")
    if not architecture or "generator" not in architecture:
        raise ArtifactError(f"checkpoint {path} has no architecture sidecar", producer="train-mapper")
    params = ParameterGenerator(GeneratorConfig.from_dict(architecture["generator"]))
    state = {}
    for name, expected in params.state_dict().items():
        if name not in blocks:
            raise ArtifactError(f"checkpoint {path} is missing block '{name}'", producer="train-mapper")
        block = blocks[name]
        if block.size != expected.numel():
            raise ArtifactError(f"block '{name}' has {block.size} values, expected {expected.numel()}",
                                producer="train-mapper")
        state[name] = torch.from_numpy(block.reshape(tuple(expected.shape)))
    params.load_state_dict(state)
    params = params.to(dtype)
    warm_rows = architecture.get("warm_rows")
    return params, (np.array(warm_rows, dtype=np.int64) if warm_rows is not None else None), architecture


def main():
    parser = argparse.ArgumentParser(description="Inspect the VM-Rec parameter generator")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    probe_parser = subparsers.add_parser("probe", help="Measure forward-pass FLOPs per stage")
    probe_parser.add_argument("K", type=int, help="Number of initial items")
    probe_parser.add_argument("N", type=int, help="Number of warm embeddings")
    probe_parser.add_argument("d", type=int, help="Embedding dimension")
    probe_parser.add_argument("d_prime", type=int, help="Hidden width of the heads")

    infer_parser = subparsers.add_parser("infer", help="Predict an embedding for a list of items")
    infer_parser.add_argument("checkpoint", help="Generator checkpoint (.vmpg)")
    infer_parser.add_argument("model", help="Base model directory")
    infer_parser.add_argument("items", type=int, nargs="+", help="Initial item ids")
    infer_parser.add_argument("--mode", choices=["deterministic", "stochastic"], default="deterministic")
    infer_parser.add_argument("--seed", type=int, default=2024, help="Seed for stochastic mode")

    args = parser.parse_args()

    if args.command == "probe":
        probe = mapping_cost_probe(args.K, args.N, args.d, args.d_prime)
        print("\n=== Forward-Pass FLOPs ===\n")
        for stage in ("projection", "attention", "pooling", "heads", "mapping", "total"):
            print(f"{stage:>10}: {getattr(probe, stage):,}")
    elif args.command == "infer":
        from generation.basemodels import load_base_model
        params, warm_rows, _ = load_generator(args.checkpoint)
        model = load_base_model(args.model)
        phi, weights = infer_embedding(args.items, model, params, args.mode, Rng(args.seed),
                                       warm_rows=warm_rows, return_weights=True)
        warm_ids = model.user_table.ids if warm_rows is None else model.user_table.ids[warm_rows]
        record = dump_weights(-1, weights, warm_ids, args.mode)
        print(f"Support size: {record['support_size']}")
        for warm_id, weight in record["top_weights"]:
            print(f"  warm user {warm_id}: {weight:.4f}")
    else:
        parser.print_help()


if __name__ == "__main__":
    main()
