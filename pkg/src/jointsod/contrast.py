"""Contrastive module: SN projection, mask-weighted region pooling, cross-task loss.

Pairs are built on contrast rather than category. For one bridge image the
SOD background, COD background and COD foreground should all look alike
(three positive pairs), while the SOD foreground and SOD background should
differ (the single negative pair).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .core import FeaturePyramid, resize_tensor

EMBED_CHANNELS = 128
REGION_EPS = 1e-6


class DegenerateRegionError(ValueError):
    """The pooling mask has (almost) no weight, so no region feature exists."""


class Role(str, enum.Enum):
    SOD_FG = "sod_fg"
    SOD_BG = "sod_bg"
    COD_FG = "cod_fg"
    COD_BG = "cod_bg"


@dataclass
class RegionFeature:
    vec: torch.Tensor
    role: Role


def sn_conv(cin, cout, kernel=3, bias=True):
    return spectral_norm(nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=bias), n_power_iterations=1)


class ContrastiveModule(nn.Module):
    """theta: four spectrally normalised, bias-free 3x3 convs on encoder group 4.

    Without biases the projection maps a zero feature to a zero embedding.
    """

    def __init__(self, in_channels, embed_channels=EMBED_CHANNELS, hidden=None):
        super().__init__()
        hidden = hidden or embed_channels
        widths = [in_channels, hidden, hidden, hidden, embed_channels]
        self.convs = nn.ModuleList(
            sn_conv(a, b, bias=False) for a, b in zip(widths, widths[1:])
        )

    @property
    def embed_channels(self):
        return self.convs[-1].out_channels

    def project(self, pyramid: FeaturePyramid) -> torch.Tensor:
        x = pyramid[3]
        for conv in self.convs[:-1]:
            x = F.relu(conv(x))
        return self.convs[-1](x)

    forward = project


def region_pool(mask: torch.Tensor, emb: torch.Tensor, eps: float = REGION_EPS) -> torch.Tensor:
    """Mask-weighted mean of ``emb``.

    ``mask`` is ``[h, w]`` or ``[N, 1, h, w]``; ``emb`` is ``[C, h, w]`` or
    ``[N, C, h, w]`` with matching spatial size. Returns ``[C]`` or ``[N, C]``.
    """
    single = emb.dim() == 3
    if single:
        emb = emb[None]
        mask = mask.reshape(1, 1, *mask.shape[-2:])
    if mask.shape[-2:] != emb.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape[-2:])} and embedding {tuple(emb.shape[-2:])} differ in size")
    total = mask.sum(dim=(1, 2, 3))
    if bool((total <= eps).any()):
        bad = torch.nonzero(total <= eps).flatten().tolist()
        raise DegenerateRegionError(f"region mask has no weight for samples {bad}")
    vec = (mask * emb).sum(dim=(2, 3)) / total[:, None]
    return vec[0] if single else vec


def _cos(a, b):
    return F.cosine_similarity(a, b, dim=-1, eps=0.0)


def contrastive_loss(sf, sb, cf, cb) -> torch.Tensor:
    """``-log(pos / (pos + exp(c(sf, sb))))`` on region features.

    Accepts RegionFeatures or raw ``[C]`` / ``[N, C]`` tensors; batched input
    returns the batch mean.
    """
    vecs = [v.vec if isinstance(v, RegionFeature) else v for v in (sf, sb, cf, cb)]
    for name, v in zip(("sod_fg", "sod_bg", "cod_fg", "cod_bg"), vecs):
        if bool((v.norm(dim=-1) == 0).any()):
            raise DegenerateRegionError(f"{name} region feature has zero norm")
    sf, sb, cf, cb = vecs
    pos = torch.stack([_cos(cf, cb), _cos(sb, cb), _cos(sb, cf)], dim=-1)
    neg = _cos(sf, sb)[..., None]
    # -log(sum_pos e / (sum_pos e + e_neg)) = logsumexp(all) - logsumexp(pos)
    loss = torch.logsumexp(torch.cat([pos, neg], dim=-1), dim=-1) - torch.logsumexp(pos, dim=-1)
    return loss.mean()


def region_features(pred_s, emb_s, pred_c, emb_c, detach_masks=True):
    """The four region features for a batch of bridge images.

    Embeddings are upsampled to the prediction size before pooling.
    """
    if detach_masks:
        pred_s, pred_c = pred_s.detach(), pred_c.detach()
    emb_s = resize_tensor(emb_s, pred_s.shape[-2:])
    emb_c = resize_tensor(emb_c, pred_c.shape[-2:])
    return (
        RegionFeature(region_pool(pred_s, emb_s), Role.SOD_FG),
        RegionFeature(region_pool(1 - pred_s, emb_s), Role.SOD_BG),
        RegionFeature(region_pool(pred_c, emb_c), Role.COD_FG),
        RegionFeature(region_pool(1 - pred_c, emb_c), Role.COD_BG),
    )


def batch_contrastive_loss(pred_s, emb_s, pred_c, emb_c, detach_masks=True, eps=REGION_EPS):
    """Per-sample loss averaged over the samples whose four regions are non-degenerate.

    Returns ``None`` when every sample is degenerate.
    """
    keep = []
    for i in range(pred_s.shape[0]):
        sums = torch.stack([pred_s[i].sum(), (1 - pred_s[i]).sum(), pred_c[i].sum(), (1 - pred_c[i]).sum()])
        if bool((sums > eps).all()):
            keep.append(i)
    if not keep:
        return None
    idx = torch.tensor(keep)
    feats = region_features(pred_s[idx], emb_s[idx], pred_c[idx], emb_c[idx], detach_masks)
    return contrastive_loss(*feats)
