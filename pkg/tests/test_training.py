import json
import math

import numpy as np
import pytest
import torch

from utils.errors import NumericalError
from utils.numerics import Rng
from generation.mapper import GAUSSIAN, build_generator, map_embedding, masked_softmax, warm_matrix
from generation.training import (TrainConfig, TrainState, ablate_distribution, build_batch, draw_train_k,
                                 kl_bernoulli, kl_gaussian, make_optimizer, make_validator, mean_pi,
                                 save_training_log, sweep_beta, sweep_proportion, toy_gradient_report, train_mapper,
                                 vib_loss)


def tiny_config(**overrides):
    values = dict(heads=2, attn_dim=4, mlp_hidden=(8,), batch_size=16, max_epochs=2, lr_grid=(0.01,), seed=1)
    values.update(overrides)
    return TrainConfig(**values)


def constant_validator(value=0.25):
    def validate(params, epoch):
        return value, 0.5
    return validate


def scripted_validator(values):
    calls = iter(values)

    def validate(params, epoch):
        value = next(calls)
        if isinstance(value, Exception):
            raise value
        return value, None
    return validate


def toy_batch(split, base, epoch=1):
    rows = np.arange(len(base.user_table))
    users = list(split.warm_users[:8])
    return build_batch(users, split, base, rows, Rng(0), epoch), warm_matrix(base, rows)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def test_kl_bernoulli_examples():
    assert float(kl_bernoulli(torch.tensor([0.3, 0.3], dtype=torch.float64), 0.3)) == pytest.approx(0.0, abs=1e-7)
    assert float(kl_bernoulli(torch.tensor([0.5], dtype=torch.float64), 0.5)) == pytest.approx(0.0, abs=1e-7)
    expected = 0.5 * math.log(0.5 / 1e-4) + 0.5 * math.log(0.5 / 0.9999)
    assert float(kl_bernoulli(torch.tensor([0.5], dtype=torch.float64), 1e-4)) == pytest.approx(expected)
    assert expected == pytest.approx(3.9120, abs=1e-4)


def test_kl_bernoulli_is_finite_for_saturated_logits():
    logit = torch.tensor([60.0, -60.0], dtype=torch.float64)
    value = kl_bernoulli(torch.sigmoid(logit), 1e-4, logit)
    assert math.isfinite(float(value))


def test_kl_gaussian_examples():
    assert float(kl_gaussian(torch.tensor([0.0]), torch.tensor([1.0]))) == pytest.approx(0.0)
    assert float(kl_gaussian(torch.tensor([2.0]), torch.tensor([1.0]))) == pytest.approx(2.0)
    assert float(kl_gaussian(torch.tensor([0.0]), torch.tensor([2.0]))) == pytest.approx(0.8069, abs=1e-4)


def test_kl_terms_sum_over_last_axis():
    mu = torch.zeros(3, 4)
    sigma = torch.full((3, 4), 2.0)
    assert kl_gaussian(mu, sigma).shape == (3,)
    assert float(kl_gaussian(mu, sigma)[0]) == pytest.approx(4 * 0.5 * (4 - 1 - math.log(4)), rel=1e-5)


def test_exact_reconstruction_has_zero_residual():
    warm = torch.tensor([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    weights = masked_softmax(torch.tensor([0.0, 0.7, 0.0]), "train", self_index=0)
    assert torch.equal(map_embedding(weights, warm), warm[1])


def test_loss_without_beta_is_pure_mse(toy_split, toy_base):
    batch, warm = toy_batch(toy_split, toy_base)
    config = tiny_config(beta=0.0)
    params = build_generator(config.generator_config(8), Rng(0))
    stats = {}
    loss, grads = vib_loss(batch, params, warm, config, stats)
    assert loss == pytest.approx(stats["loss_mse"])
    assert stats["loss_kl"] > 0
    assert set(grads) == {name for name, _ in params.named_parameters()}


def test_loss_decomposes_into_mse_and_kl(toy_split, toy_base):
    batch, warm = toy_batch(toy_split, toy_base)
    config = tiny_config(beta=1e-2)
    params = build_generator(config.generator_config(8), Rng(0))
    stats = {}
    loss, _ = vib_loss(batch, params, warm, config, stats)
    assert loss == pytest.approx(stats["loss_mse"] + 1e-2 * stats["loss_kl"], rel=1e-5)
    assert len(stats["support_size"]) == 8
    assert 0.0 < stats["mean_pi"] < 1.0


def test_squared_mse_form(toy_split, toy_base):
    batch, warm = toy_batch(toy_split, toy_base)
    params = build_generator(tiny_config().generator_config(8), Rng(0))
    norm_stats, squared_stats = {}, {}
    vib_loss(batch, params, warm, tiny_config(beta=0.0), norm_stats)
    vib_loss(batch, params, warm, tiny_config(beta=0.0, mse_form="squared"), squared_stats)
    # mean of squares is at least the square of the mean
    assert squared_stats["loss_mse"] >= norm_stats["loss_mse"] ** 2 - 1e-4


def test_gaussian_kind_uses_every_non_self_warm_user(toy_split, toy_base):
    batch, warm = toy_batch(toy_split, toy_base)
    config = tiny_config(kind=GAUSSIAN)
    params = build_generator(config.generator_config(8), Rng(0))
    stats = {}
    vib_loss(batch, params, warm, config, stats)
    assert stats["support_size"] == [len(toy_base.user_table) - 1.0] * 8
    assert stats["empty_support"] == 0


def test_l1_term_raises_the_loss(toy_split, toy_base):
    batch, warm = toy_batch(toy_split, toy_base)
    params = build_generator(tiny_config(kind=GAUSSIAN).generator_config(8), Rng(0))
    plain, _ = vib_loss(batch, params, warm, tiny_config(kind=GAUSSIAN))
    penalized, _ = vib_loss(batch, params, warm, tiny_config(kind=GAUSSIAN, l1_lambda=1.0))
    assert penalized > plain


def test_non_finite_targets_abort(toy_split, toy_base):
    batch, warm = toy_batch(toy_split, toy_base)
    batch.targets[0, 0] = float("nan")
    config = tiny_config()
    params = build_generator(config.generator_config(8), Rng(0))
    with pytest.raises(NumericalError):
        vib_loss(batch, params, warm, config)


def test_toy_gradient_check_passes():
    report = toy_gradient_report(Rng(0))
    assert {"encoder.query.weight", "encoder.key.weight", "heads.pi_out.weight"} <= set(report)
    assert max(report.values()) < 1e-4


@pytest.mark.parametrize("draw", range(1, 6))
def test_toy_gradient_check_passes_for_several_draws(draw):
    assert max(toy_gradient_report(Rng(draw)).values()) < 1e-4


@pytest.mark.slow
def test_gradient_check_over_random_parameter_draws():
    worst = max(max(toy_gradient_report(Rng(draw)).values()) for draw in range(100))
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

def test_train_k_is_capped_by_history():
    ks = {draw_train_k(Rng(0).substream(i), 10) for i in range(200)}
    assert ks == {1, 2, 3}
    # warm targets are the user's own embedding, so the whole history may be used
    assert {draw_train_k(Rng(0).substream(i), 2) for i in range(50)} == {1, 2}
    assert {draw_train_k(Rng(0).substream(i), 1) for i in range(20)} == {1}


def test_batch_noise_is_fixed_per_epoch_and_user(toy_split, toy_base):
    first, _ = toy_batch(toy_split, toy_base, epoch=1)
    again, _ = toy_batch(toy_split, toy_base, epoch=1)
    later, _ = toy_batch(toy_split, toy_base, epoch=2)
    assert torch.equal(first.noise.eps, again.noise.eps)
    assert torch.equal(first.items, again.items)
    assert not torch.equal(first.noise.eps, later.noise.eps)


def test_batch_self_index_points_at_own_embedding(toy_split, toy_base):
    batch, warm = toy_batch(toy_split, toy_base)
    for row in range(len(batch.users)):
        assert torch.equal(warm[batch.self_index[row]], batch.targets[row])
    assert batch.mask.sum(-1).max() <= 3


def test_users_outside_warm_subset_have_no_self_index(toy_split, toy_base):
    rows = np.array([0, 1])
    users = [toy_split.warm_users[0], toy_split.warm_users[5]]
    batch = build_batch(users, toy_split, toy_base, rows, Rng(0), 1)
    assert batch.self_index.tolist() == [0, -1]


# ---------------------------------------------------------------------------
# Optimizer and loop
# ---------------------------------------------------------------------------

def test_adamw_decay_is_decoupled():
    params = build_generator(tiny_config().generator_config(8), Rng(0))
    before = {name: p.detach().clone() for name, p in params.named_parameters()}
    optimizer = make_optimizer(params, lr=0.1, weight_decay=0.5)
    for p in params.parameters():
        p.grad = torch.zeros_like(p)
    optimizer.step()
    for name, p in params.named_parameters():
        assert torch.allclose(p.detach(), before[name] * (1 - 0.1 * 0.5)), name
    state = TrainState(params, optimizer)
    moments = state.moments()
    assert set(moments) == set(before)
    assert all(m[0].shape == before[name].shape for name, m in moments.items())


def test_early_stopping_after_patience(toy_split, toy_base):
    config = tiny_config(patience=1, max_epochs=10)
    result = train_mapper(toy_split, toy_base, config, Rng(0), validator=constant_validator())
    assert [r["epoch"] for r in result.history] == [1, 2]
    assert result.best_epoch == 1
    assert result.best_val_ndcg == 0.25


def test_best_learning_rate_is_selected(toy_split, toy_base):
    config = tiny_config(patience=1, max_epochs=5, lr_grid=(0.1, 0.01))
    seen = []
    result = train_mapper(toy_split, toy_base, config, Rng(0), validator=scripted_validator([0.3, 0.2, 0.5, 0.1]),
                          on_epoch=seen.append)
    assert result.lr == 0.01
    assert result.best_val_ndcg == 0.5
    assert [r["lr"] for r in result.history] == [0.1, 0.1, 0.01, 0.01]
    assert seen == result.history


def test_diverged_learning_rate_is_skipped(toy_split, toy_base):
    config = tiny_config(patience=1, lr_grid=(0.1, 0.01))
    validator = scripted_validator([NumericalError("boom", "phi_hat"), 0.4, 0.3])
    result = train_mapper(toy_split, toy_base, config, Rng(0), validator=validator)
    assert result.lr == 0.01


def test_all_learning_rates_diverging_is_an_error(toy_split, toy_base):
    config = tiny_config(lr_grid=(0.1, 0.01))
    validator = scripted_validator([NumericalError("boom"), NumericalError("boom")])
    with pytest.raises(NumericalError, match="every learning rate diverged"):
        train_mapper(toy_split, toy_base, config, Rng(0), validator=validator)


def test_training_with_validation_records_history(toy_split, toy_base):
    result = train_mapper(toy_split, toy_base, tiny_config(), Rng(0))
    record = result.history[0]
    assert {"epoch", "lr", "loss_mse", "loss_kl", "val_ndcg5", "mean_pi", "mean_support_size",
            "empty_support_count"} <= set(record)
    assert 0.0 <= result.best_val_ndcg <= 1.0
    assert len(result.warm_rows) == len(toy_base.user_table)


def test_training_is_reproducible(toy_split, toy_base):
    first = train_mapper(toy_split, toy_base, tiny_config(max_epochs=1), Rng(3), validator=constant_validator())
    second = train_mapper(toy_split, toy_base, tiny_config(max_epochs=1), Rng(3), validator=constant_validator())
    for (name, p), (_, q) in zip(first.params.named_parameters(), second.params.named_parameters()):
        assert torch.equal(p, q), name


def test_validator_reports_mean_pi(toy_split, toy_base):
    config = tiny_config()
    rows = np.arange(len(toy_base.user_table))
    params = build_generator(config.generator_config(8), Rng(0))
    ndcg, pi = make_validator(toy_base, toy_split, config, rows, Rng(0))(params, 1)
    assert 0.0 <= ndcg <= 1.0
    assert 0.0 < pi < 1.0
    gaussian = build_generator(tiny_config(kind=GAUSSIAN).generator_config(8), Rng(0))
    assert mean_pi(gaussian, toy_base, toy_split, toy_split.val_users, 1, warm_matrix(toy_base)) is None


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(patience=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(warm_proportion=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(mse_form="l1").validate()


# ---------------------------------------------------------------------------
# Ablations and sweeps
# ---------------------------------------------------------------------------

def test_gaussian_l1_with_zero_weight_matches_gaussian(toy_split, toy_base):
    config = tiny_config(max_epochs=1)
    gaussian = ablate_distribution("gaussian", toy_split, toy_base, config, Rng(2), validator=constant_validator())
    l1 = ablate_distribution("gaussian_l1", toy_split, toy_base, config, Rng(2), l1_grid=(0.0,),
                             validator=constant_validator())
    assert gaussian.params.config.kind == GAUSSIAN
    for (name, p), (_, q) in zip(gaussian.params.named_parameters(), l1.params.named_parameters()):
        assert torch.equal(p, q), name


def test_unknown_ablation_kind():
    with pytest.raises(ValueError):
        ablate_distribution("laplace", None, None, tiny_config())


def test_beta_sweep_rows(toy_split, toy_base):
    rows, rho = sweep_beta(toy_split, toy_base, tiny_config(max_epochs=1), Rng(0), betas=(1e-6, 1e-2), shots=(1,))
    assert [r["beta"] for r in rows] == [1e-6, 1e-2]
    assert set(rows[0]["test_ndcg5"]) == {1}
    assert rho is None or -1.0 <= rho <= 1.0


def test_proportion_sweep_uses_warm_subsets(toy_split, toy_base):
    rows = sweep_proportion(toy_split, toy_base, tiny_config(max_epochs=1), Rng(0), proportions=(0.5, 1.0),
                            shots=(1,))
    n = len(toy_base.user_table)
    assert [r["warm_embeddings"] for r in rows] == [round(n * 0.5), n]


def test_training_log_is_json_lines(tmp_path):
    path = save_training_log([{"epoch": 1, "val_ndcg5": 0.1}, {"epoch": 2, "val_ndcg5": 0.2}], tmp_path / "log.jsonl")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [1, 2]
