import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sdmae.config import LossWeights, tiny_model
from sdmae.distillation import DistributionPair
from sdmae.errors import ContractError, DimensionError, ParameterError
from sdmae.model import SDMAE
from sdmae.objectives import (
    combine,
    entropy,
    loss_decoupled,
    loss_distill,
    loss_feature_mse,
    loss_mae,
    loss_total,
    metric_columns,
    mse,
)
from sdmae.patching import patchify, random_mask


def loop_mse(a, b):
    total, n = 0.0, 0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        total += (float(x) - float(y)) ** 2
        n += 1
    return total / n


def loop_ce(p, q):
    rows = p.reshape(-1, p.shape[-1])
    qs = q.reshape(-1, q.shape[-1])
    acc = 0.0
    for pr, qr in zip(rows, qs):
        acc += -sum(float(a) * math.log(max(float(b), 1e-12)) for a, b in zip(pr, qr))
    return acc / len(rows)


def _t(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


def test_mae_hand_cases(rng):
    y = _t(rng, 2, 3, 4)
    assert loss_mae(y, y).item() == 0.0
    assert loss_mae(torch.ones(2, 3, 4), torch.zeros(2, 3, 4)).item() == 1.0
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
    assert abs(loss_mae(a, b).item() - loop_mse(a.numpy(), b.numpy())) < 1e-7


def test_mae_empty_warns():
    with pytest.warns(RuntimeWarning):
        assert loss_mae(torch.zeros(2, 0, 4), torch.zeros(2, 0, 4)).item() == 0.0


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        mse(torch.zeros(2, 3), torch.zeros(3, 2))


def test_decoupled_reductions(rng):
    ym, yv, tm, tv = _t(rng, 2, 5, 4), _t(rng, 2, 3, 4), _t(rng, 2, 5, 4), _t(rng, 2, 3, 4)
    assert loss_decoupled(ym, yv, tm, tv, 0.0).item() == loss_mae(ym, tm).item()
    half = 0.5 * (loss_mae(ym, tm) + mse(yv, tv))
    assert abs(loss_decoupled(ym, yv, tm, tv, 0.5).item() - half.item()) < 1e-12
    assert loss_decoupled(ym, tv, tm, tv, 1.0).item() == 0.0
    with pytest.raises(ParameterError):
        loss_decoupled(ym, yv, tm, tv, 1.5)


def test_feature_mse(rng):
    a = _t(rng, 2, 3, 5)
    assert loss_feature_mse(a, a).item() == 0.0
    assert loss_feature_mse(torch.zeros(2, 3), torch.ones(2, 3)).item() == 1.0
    b = _t(rng, 2, 3, 5)
    assert abs(loss_feature_mse(a, b).item() - loop_mse(a.numpy(), b.numpy())) < 1e-7


def test_feature_mse_detaches_target():
    target = torch.randn(2, 3, requires_grad=True)
    pred = torch.randn(2, 3, requires_grad=True)
    loss_feature_mse(target, pred).backward()
    assert target.grad is None and pred.grad is not None


def test_distill_hand_cases():
    K = 4096
    u = torch.full((1, 1, K), 1.0 / K, dtype=torch.float64)
    assert abs(loss_distill(DistributionPair(u, u)).item() - math.log(K)) < 1e-9
    assert abs(math.log(4096) - 8.3178) < 1e-4
    p = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    q = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    assert abs(loss_distill(DistributionPair(q=q, p=p)).item() - math.log(2)) < 1e-12


def _random_simplex(rng, shape):
    x = rng.random(shape) + 1e-3
    return torch.from_numpy(x / x.sum(-1, keepdims=True))


def test_distill_loop_oracle_and_gibbs(rng):
    for _ in range(20):
        p = _random_simplex(rng, (4, 5))
        q = _random_simplex(rng, (4, 5))
        val = loss_distill(DistributionPair(q=q, p=p)).item()
        assert abs(val - loop_ce(p.numpy(), q.numpy())) < 1e-12
        assert val >= entropy(p).mean().item() - 1e-12


def test_distill_rejects_non_stochastic():
    p = torch.tensor([[0.7, 0.7]])
    q = torch.tensor([[0.5, 0.5]])
    with pytest.raises(ContractError):
        loss_distill(DistributionPair(q=q, p=p))
    with pytest.raises(ContractError):
        loss_distill(DistributionPair(q=torch.tensor([[1.2, -0.2]]), p=q))
    with pytest.raises(DimensionError):
        loss_distill(DistributionPair(q=torch.ones(1, 3) / 3, p=q))


def test_distill_log_clamp_keeps_finite():
    p = torch.tensor([[0.0, 1.0]])
    q = torch.tensor([[1.0, 0.0]])
    val = loss_distill(DistributionPair(q=q, p=p)).item()
    assert math.isfinite(val) and abs(val - (-math.log(1e-12))) < 1e-3


def test_total_combination():
    r, d = torch.tensor(1.0), torch.tensor(2.0)
    assert loss_total(r, d, 0.0).item() == 1.0
    assert loss_total(r, d, 1.0).item() == 2.0
    assert abs(loss_total(r, d, 0.2).item() - 1.2) < 1e-6
    with pytest.raises(ParameterError):
        loss_total(r, d, -0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 10), st.floats(0, 10))
def test_total_is_convex_combination(beta, r, d):
    val = loss_total(torch.tensor(r, dtype=torch.float64), torch.tensor(d, dtype=torch.float64), beta).item()
    assert min(r, d) - 1e-9 <= val <= max(r, d) + 1e-9


def test_metric_columns():
    assert metric_columns("mae") == ["total", "recon_masked"]
    assert "distill" in metric_columns("sd_mae") and "recon_visible" not in metric_columns("sd_mae")
    assert metric_columns("decoupled_pixel")[-1] == "recon_visible"


@pytest.mark.parametrize(
    "weights",
    [
        LossWeights("mae"),
        LossWeights("decoupled_pixel", alpha=0.5),
        LossWeights("decoupled_pixel", alpha=0.2),
        LossWeights("decoupled_feature_mse", alpha=0.2),
        LossWeights("sd_mae", beta=0.2),
    ],
)
def test_report_total_matches_components(weights):
    torch.manual_seed(0)
    model = SDMAE(tiny_model()).double()
    seq = patchify(torch.rand(2, 8, 8, 3, dtype=torch.float64), 4)
    plan = random_mask(seq, 0.5, 1)
    report, _ = model.loss(seq, plan, weights)
    parts = report.components()
    assert set(parts) == set(metric_columns(weights.mode))
    assert abs(combine(report, weights).item() - parts["total"]) < 1e-6
    assert report.counts == (2, 2)
    assert all(v >= 0 for v in parts.values())
