#!/usr/bin/env python3
"""
Numerics

Shared numerical helpers for the VM-Rec scripts.
It provides:
1. Seeded, splittable random streams (one substream per epoch, user, noise source)
2. Gaussian and Gumbel noise draws
3. Pathwise gradients of the generator loss through torch autograd
4. A central finite-difference oracle for those gradients

Training runs in float32; gradient checks require float64 parameters.
"""

import os
import sys
import zlib
from collections import OrderedDict

import numpy as np
import torch

from utils.errors import NumericalError

UNIFORM_EPS = 1e-12
EULER_GAMMA = 0.5772156649015329
REGIME_HALVINGS = 8


def _stream_key(key):
    """Turn an int or str key into a nonnegative SeedSequence spawn key entry."""
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"substream keys must be int or str, got {type(key).__name__}")


class Rng:
    """
    Seeded random stream built on numpy's SeedSequence + PCG64.

    Substreams are derived from spawn keys, so rng.substream("epoch", 3, user_id)
    gives the same draws on every run and platform regardless of what other
    substreams were consumed before it.
    """

    def __init__(self, seed, spawn_key=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.spawn_key = tuple(spawn_key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def substream(self, *keys):
        return Rng(self.seed, self.spawn_key + tuple(_stream_key(k) for k in keys))

    def uniform(self, n):
        return self.generator.random(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"


def sample_gaussian(rng, n):
    """Draw n i.i.d. standard normal values from the given stream."""
    if n < 1:
        raise ValueError(f"sample_gaussian needs n >= 1, got {n}")
    return rng.generator.standard_normal(n)


def sample_gumbel(rng, n):
    """Draw n Gumbel(0, 1) values via -log(-log(u)) with u clamped away from {0, 1}."""
    if n < 1:
        raise ValueError(f"sample_gumbel needs n >= 1, got {n}")
    u = np.clip(rng.generator.random(n), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def progress_disabled():
    """Progress bars are off when stderr is not a terminal or VMREC_QUIET is set."""
    return bool(os.environ.get("VMREC_QUIET")) or not sys.stderr.isatty()


def first_non_finite(intermediates):
    """Return the name of the first intermediate holding a NaN or Inf, or None."""
    for name, value in intermediates.items():
        if isinstance(value, torch.Tensor):
            if not torch.isfinite(value.detach()).all():
                return name
        elif not np.all(np.isfinite(value)):
            return name
    return None


class ParamGradients(OrderedDict):
    """Gradient blocks keyed by parameter name, shape-matched to the module's parameters."""

    def assign(self, module):
        """Write the blocks into module parameters' .grad so a torch optimizer can step."""
        for name, param in module.named_parameters():
            if name in self:
                param.grad = self[name].detach().clone().to(param.dtype)

    def max_abs(self):
        return max((float(g.abs().max()) for g in self.values() if g.numel()), default=0.0)


def _run_closure(loss_closure, params):
    out = loss_closure(params)
    if isinstance(out, tuple):
        loss, intermediates = out
    else:
        loss, intermediates = out, OrderedDict()
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise TypeError("loss_closure must return a scalar tensor")
    return loss.reshape(()), intermediates


def _raise_if_non_finite(loss, intermediates):
    if torch.isfinite(loss.detach()):
        return
    raise NumericalError("non-finite loss", first_non_finite(intermediates) or "loss")


def differentiate(loss_closure, params):
    """
    Evaluate loss_closure(params) and its exact gradients w.r.t. every trainable
    parameter of params, with all noise held fixed by the closure.

    Returns (loss, ParamGradients). Parameters the loss does not touch get zero blocks.
    """
    loss, intermediates = _run_closure(loss_closure, params)
    _raise_if_non_finite(loss, intermediates)

    named = [(name, p) for name, p in params.named_parameters() if p.requires_grad]
    if loss.requires_grad:
        raw = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    else:
        raw = [None] * len(named)

    grads = ParamGradients()
    for (name, param), grad in zip(named, raw):
        grads[name] = torch.zeros_like(param) if grad is None else grad.detach()
        if not torch.isfinite(grads[name]).all():
            raise NumericalError("non-finite gradient", name)
    return float(loss.detach()), grads


def _loss_value(loss_closure, params):
    """Loss and the closure's "regime" intermediate (None when it reports none)."""
    with torch.no_grad():
        loss, intermediates = _run_closure(loss_closure, params)
    regime = intermediates.get("regime")
    return float(loss), (None if regime is None else regime.detach().clone())


def _central_difference(loss_closure, params, flat, j, h, order, regime):
    """
    Central difference for one scalar. The step is halved (up to REGIME_HALVINGS
    times) while any stencil point leaves the regime observed at p.
    """
    original = float(flat[j])
    step = h
    for _ in range(REGIME_HALVINGS + 1):
        offsets = (step, -step) if order == 2 else (step, -step, 2.0 * step, -2.0 * step)
        values, crossed = [], False
        for offset in offsets:
            flat[j] = original + offset
            value, seen = _loss_value(loss_closure, params)
            values.append(value)
            crossed = crossed or (regime is not None and not torch.equal(seen, regime))
        flat[j] = original
        if not crossed:
            break
        step /= 2.0
    if order == 2:
        return (values[0] - values[1]) / (2.0 * step)
    return (8.0 * (values[0] - values[1]) - (values[2] - values[3])) / (12.0 * step)


def gradient_report(loss_closure, params, h=1e-5, order=2):
    """
    Compare analytic gradients with central finite differences, block by block.

    Returns an ordered mapping parameter name -> max relative error, where the
    relative error of one scalar is |analytic - numeric| / max(1e-8, |analytic|).
    order=2 is (f(p+h) - f(p-h)) / 2h; order=4 adds the 2h points, which cancels
    the h^2 term and allows a larger h when gradients are small.

    A closure over a piecewise-smooth loss (ReLU) may return a boolean "regime"
    intermediate; stencils that cross into another regime are retried with a smaller step.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    if order not in (2, 4):
        raise ValueError(f"finite-difference order must be 2 or 4, got {order}")
    for name, param in params.named_parameters():
        if param.dtype != torch.float64:
            raise ValueError(f"gradient checks need float64 parameters; '{name}' is {param.dtype}")

    _, grads = differentiate(loss_closure, params)
    report = OrderedDict()
    with torch.no_grad():
        _, regime = _loss_value(loss_closure, params)
        for name, param in params.named_parameters():
            if not param.requires_grad:
                continue
            flat = param.data.view(-1)
            analytic = grads[name].reshape(-1)
            worst = 0.0
            for j in range(flat.numel()):
                numeric = _central_difference(loss_closure, params, flat, j, h, order, regime)
                exact = float(analytic[j])
                worst = max(worst, abs(exact - numeric) / max(1e-8, abs(exact)))
            report[name] = worst
    return report


def grad_check(loss_closure, params, h=1e-5, order=2):
    """Max relative error of analytic vs central-difference gradients over all scalars."""
    report = gradient_report(loss_closure, params, h, order)
    return max(report.values(), default=0.0)
