import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from jointsod.losses import edge_weight, structure_loss

from conftest import assert_grad_close, central_diff


def _sliding_average_oracle(y, k=31):
    """Direct window mean with replicate padding, one pixel at a time."""
    h, w = y.shape
    r = k // 2
    out = np.empty_like(y)
    for i in range(h):
        for j in range(w):
            rows = np.clip(np.arange(i - r, i + r + 1), 0, h - 1)
            cols = np.clip(np.arange(j - r, j + r + 1), 0, w - 1)
            out[i, j] = y[np.ix_(rows, cols)].mean()
    return out


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_edge_weight_constant_is_exactly_one(value):
    y = torch.full((2, 1, 37, 23), value, dtype=torch.float64)
    assert torch.equal(edge_weight(y), torch.ones_like(y))
    assert torch.equal(edge_weight(y.float()), torch.ones_like(y.float()))


def test_edge_weight_step_edge_matches_pooling_oracle():
    y = np.zeros((64, 64))
    y[:, :32] = 1.0
    expected = 1 + 5 * np.abs(_sliding_average_oracle(y) - y)
    got = edge_weight(torch.from_numpy(y)[None, None])[0, 0].numpy()
    assert np.allclose(got, expected, atol=1e-12)
    col = got[0]
    assert col.argmax() in (31, 32)
    # the edge sits between columns 31 and 32; the window radius is 15
    assert np.all(col[:17] == 1.0) and np.all(col[47:] == 1.0)
    assert np.all(col[17:47] > 1.0)
    assert col.max() == pytest.approx(1 + 5 * 15 / 31)


def test_structure_loss_2x2_closed_form():
    y = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    logits = torch.zeros_like(y)
    bce = math.log(2)
    iou = 1 - 1 / (0.5 * 4 + 1)
    assert iou == pytest.approx(2 / 3)
    assert float(structure_loss(logits, y)) == pytest.approx(bce + iou, abs=1e-12)
    assert float(structure_loss(logits, y)) == pytest.approx(1.359814, abs=1e-5)


def _half_plane(n=64):
    y = torch.zeros(1, 1, n, n, dtype=torch.float64)
    y[..., : n // 2] = 1
    return y


def test_perfect_prediction_limit():
    y = _half_plane()
    logits = 40 * y - 20
    assert float(structure_loss(logits, y)) < 1e-6


def test_anti_prediction_saturates_iou_term():
    y = _half_plane()
    logits = 20 - 40 * y
    w = edge_weight(y)
    p = torch.sigmoid(logits)
    iou = 1 - ((w * p * y).sum() + 1) / ((w * (p + y - p * y)).sum() + 1)
    assert float(iou) > 0.9
    assert float(structure_loss(logits, y)) > 0.9


def test_shape_mismatch():
    with pytest.raises(ValueError):
        structure_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_gradient_matches_finite_differences(rng):
    y = torch.from_numpy((rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64))
    x = torch.from_numpy(rng.normal(size=(1, 1, 8, 8))).requires_grad_(True)
    structure_loss(x, y).backward()
    fd = central_diff(lambda v: structure_loss(v, y), x)
    assert_grad_close(x.grad, fd, rtol=1e-4)


def test_one_gradient_step_decreases_loss(rng):
    y = torch.from_numpy((rng.random((2, 1, 16, 16)) > 0.5).astype(np.float64))
    x = torch.from_numpy(rng.normal(size=(2, 1, 16, 16))).requires_grad_(True)
    loss = structure_loss(x, y)
    loss.backward()
    with torch.no_grad():
        stepped = x - 1e-2 * x.grad
    assert float(structure_loss(stepped, y)) < float(loss.detach())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 30.0))
def test_terms_non_negative(seed, scale):
    g = np.random.default_rng(seed)
    y = torch.from_numpy(g.random((1, 1, 12, 12)).round())
    x = torch.from_numpy(g.normal(size=(1, 1, 12, 12)) * scale)
    w = edge_weight(y)
    assert torch.all((w >= 1) & (w <= 6))
    total = structure_loss(x, y)
    assert torch.isfinite(total) and float(total) >= 0
    p = torch.sigmoid(x)
    iou = 1 - ((w * p * y).sum() + 1) / ((w * (p + y - p * y)).sum() + 1)
    assert float(iou) >= 0


def test_extreme_logits_stay_finite():
    y = _half_plane(16)
    x = torch.where(y > 0, -1e4, 1e4).double()
    assert torch.isfinite(structure_loss(x, y))
