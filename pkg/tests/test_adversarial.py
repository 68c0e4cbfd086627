import math

import numpy as np
import pytest
import torch

from jointsod.adversarial import (
    Discriminator,
    DiscriminatorConfig,
    discriminator_loss,
    frozen,
    generator_adv_loss,
    uncertainty_map,
)

from conftest import assert_grad_close, central_diff


def _bce(s, q):
    """Elementwise binary cross-entropy, averaged."""
    s, q = np.asarray(s, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return float(np.mean(-(q * np.log(s) + (1 - q) * np.log(1 - s))))


@pytest.fixture
def inst(rng):
    disc = Discriminator().double().eval()
    image = torch.from_numpy(rng.random((2, 3, 8, 8)))
    y = torch.from_numpy((rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64))
    pred = torch.from_numpy(rng.uniform(0.05, 0.95, (2, 1, 8, 8)))
    return disc, image, pred, y


def test_config_contract():
    cfg = DiscriminatorConfig()
    assert cfg.widths == [64, 64, 64, 64, 1] and cfg.kernel == 3
    disc = Discriminator(cfg)
    convs = disc.convs
    assert len(convs) == 5
    assert all(hasattr(c, "parametrizations") and hasattr(c.parametrizations, "weight") for c in convs)
    assert all(c.stride == (1, 1) for c in convs)
    with pytest.raises(ValueError):
        DiscriminatorConfig(widths=[64, 64, 1])


def test_output_shape_range_and_determinism(rng):
    disc = Discriminator().eval()
    image = torch.rand(1, 3, 40, 24)
    m = torch.rand(1, 1, 40, 24)
    a, b = disc(image, m), disc(image, m)
    assert a.shape == (1, 1, 40, 24)
    assert torch.all((a > 0) & (a < 1))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        disc(image, torch.rand(1, 1, 40, 23))


def test_map_channel_matters_after_one_step(rng):
    disc = Discriminator(DiscriminatorConfig(widths=[16, 16, 16, 16, 1]))
    opt = torch.optim.Adam(disc.parameters(), lr=1e-2)
    image = torch.rand(4, 3, 16, 16)
    y = (torch.rand(4, 1, 16, 16) > 0.5).float()
    pred = torch.rand(4, 1, 16, 16)
    discriminator_loss(image, pred, y, disc).backward()
    opt.step()
    disc.eval()
    with torch.no_grad():
        assert not torch.allclose(disc(image, pred), disc(image, 1 - pred))


def test_generator_loss_identical_argument_is_entropy(inst):
    disc, image, _, y = inst
    with torch.no_grad():
        q = disc(image, y).numpy()
    got = float(generator_adv_loss(image, y, y, disc))
    assert got == pytest.approx(_bce(q, q), abs=1e-6)


def test_generator_loss_constant_half_is_ln2(inst):
    disc, image, pred, y = inst
    bn = disc.net[-3]
    assert isinstance(bn, torch.nn.BatchNorm2d)
    # zero affine on the last normalisation feeds a zero map to the bias-zeroed final conv
    with torch.no_grad():
        bn.weight.zero_()
        bn.bias.zero_()
        disc.convs[-1].bias.zero_()
    assert torch.all(disc(image, pred) == 0.5)
    assert float(generator_adv_loss(image, pred, y, disc)) == pytest.approx(math.log(2), abs=1e-12)


def test_generator_loss_matches_bce_oracle(inst):
    disc, image, pred, y = inst
    with torch.no_grad():
        s, q = disc(image, pred).numpy(), disc(image, y).numpy()
    assert float(generator_adv_loss(image, pred, y, disc)) == pytest.approx(_bce(s, q), abs=1e-10)


def test_discriminator_loss_matches_bce_oracle(inst):
    disc, image, pred, y = inst
    with torch.no_grad():
        s_pred, s_gt = disc(image, pred).numpy(), disc(image, y).numpy()
    oracle = _bce(s_pred, np.abs(pred.numpy() - y.numpy())) + _bce(s_gt, np.zeros_like(s_gt))
    assert float(discriminator_loss(image, pred, y, disc).detach()) == pytest.approx(oracle, abs=1e-10)
    same = float(discriminator_loss(image, y, y, disc).detach())
    assert same == pytest.approx(2 * _bce(s_gt, np.zeros_like(s_gt)), abs=1e-10)


class _Oracle(torch.nn.Module):
    """Stand-in discriminator that knows the residual exactly."""

    def __init__(self, y, scale):
        super().__init__()
        self.y, self.scale = y, scale

    def logits(self, image, m):
        return self.scale * (2 * (m - self.y).abs() - 1)


def test_perfect_discriminator_limit():
    y = (torch.rand(1, 1, 8, 8) > 0.5).double()
    pred = 1 - y  # binary residual of ones
    image = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    losses = [float(discriminator_loss(image, pred, y, _Oracle(y, s))) for s in (5, 10, 30)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-12


def test_generator_loss_gradient_isolation(inst):
    disc, image, pred, y = inst
    disc.train()
    pred = pred.clone().requires_grad_(True)
    generator_adv_loss(image, pred, y, disc).backward()
    assert all(p.grad is None for p in disc.parameters())
    assert float(pred.grad.abs().sum()) > 0
    assert all(p.requires_grad for p in disc.parameters())


def test_discriminator_loss_gradient_isolation(inst):
    disc, image, pred, y = inst
    disc.train()
    pred = pred.clone().requires_grad_(True)
    discriminator_loss(image, pred, y, disc).backward()
    assert pred.grad is None
    assert all(p.grad is not None for p in disc.parameters())


def test_frozen_restores_flags():
    disc = Discriminator()
    next(disc.parameters()).requires_grad_(False)
    flags = [p.requires_grad for p in disc.parameters()]
    with frozen(disc):
        assert not any(p.requires_grad for p in disc.parameters())
    assert [p.requires_grad for p in disc.parameters()] == flags


def test_generator_loss_gradient_matches_fd(inst):
    disc, image, pred, y = inst
    x = pred.clone().requires_grad_(True)
    generator_adv_loss(image, x, y, disc).backward()
    fd = central_diff(lambda v: generator_adv_loss(image, v, y, disc), x)
    assert_grad_close(x.grad, fd, rtol=1e-4)


def test_discriminator_loss_gradient_matches_fd(inst, rng):
    disc, image, pred, y = inst
    # eval mode freezes batch statistics and the power-iteration vector
    disc.zero_grad()
    discriminator_loss(image, pred, y, disc).backward()
    params = [p for p in disc.parameters()]
    for k in rng.choice(len(params), size=6, replace=False):
        p = params[k]
        idx = [int(i) for i in rng.choice(p.numel(), size=min(4, p.numel()), replace=False)]

        def f(v, p=p):
            with torch.no_grad():
                old = p.data.clone()
                p.data.copy_(v)
                out = discriminator_loss(image, pred, y, disc)
                p.data.copy_(old)
            return out

        fd = central_diff(f, p.data, idx=idx)
        assert_grad_close(p.grad, fd, rtol=1e-4)


def test_discriminator_loss_wrt_image_matches_fd(inst):
    disc, image, pred, y = inst
    x = image.clone().requires_grad_(True)
    discriminator_loss(x, pred, y, disc).backward()
    fd = central_diff(lambda v: discriminator_loss(v, pred, y, disc), x, idx=range(0, x.numel(), 5))
    assert_grad_close(x.grad, fd, rtol=1e-4)


def test_spectral_norm_bound_after_power_iteration():
    disc = Discriminator().train()
    x, m = torch.rand(2, 3, 8, 8), torch.rand(2, 1, 8, 8)
    with torch.no_grad():
        for _ in range(60):
            disc(x, m)
    for conv in disc.convs:
        w = conv.weight.detach().reshape(conv.out_channels, -1).double()
        assert float(torch.linalg.matrix_norm(w, ord=2)) <= 1 + 1e-2


def test_two_discriminators_never_share_parameters():
    a, b = Discriminator(), Discriminator()
    assert not {id(p) for p in a.parameters()} & {id(p) for p in b.parameters()}


def test_uncertainty_map_range_and_mode(inst):
    disc, image, pred, _ = inst
    disc.train()
    u = uncertainty_map(image, pred, disc)
    assert disc.training
    assert u.shape == pred.shape and torch.all((u > 0) & (u < 1))
    assert not u.requires_grad
