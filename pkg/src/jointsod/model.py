"""Feature encoders and the shared prediction decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeaturePyramid, resize_tensor

PAPER_CHANNELS = [256, 512, 1024, 2048]
TOY_CHANNELS = [16, 32, 64, 128]
HEAD_CHANNELS = 32
DILATIONS = (1, 2, 4, 8)
HA_KERNEL = 31
HA_SIGMA = 4.0


@dataclass
class EncoderConfig:
    variant: str = "toy_backbone"
    channels: list = field(default_factory=lambda: list(TOY_CHANNELS))
    pretrained_weights_path: str | None = None

    def __post_init__(self):
        if self.variant not in ("toy_backbone", "paper_backbone"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.variant == "paper_backbone":
            self.channels = list(PAPER_CHANNELS)
        if len(self.channels) != 4:
            raise ValueError("an encoder has exactly 4 feature groups")
        self.channels = [int(c) for c in self.channels]


class ResidualBlock(nn.Module):
    """``x + conv(relu(conv(relu(x))))`` with two 3x3 convolutions."""

    def __init__(self, channels, norm=False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=not norm)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=not norm)
        self.bn1 = nn.BatchNorm2d(channels) if norm else nn.Identity()
        self.bn2 = nn.BatchNorm2d(channels) if norm else nn.Identity()

    def forward(self, x):
        out = self.bn1(self.conv1(F.relu(x)))
        out = self.bn2(self.conv2(F.relu(out)))
        return x + out


def _down(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Stride-2 stem followed by four {stride-2 conv, residual block} stages.

    Group ``k`` (1-based) has stride ``2**(k+1)``, like a ResNet.
    """

    def __init__(self, channels=TOY_CHANNELS):
        super().__init__()
        stem = channels[0] // 2 or 1
        self.stem = _down(3, stem)
        cins = [stem] + list(channels[:3])
        self.stages = nn.ModuleList(
            nn.Sequential(_down(cin, cout), ResidualBlock(cout, norm=True))
            for cin, cout in zip(cins, channels)
        )

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNet50Backbone(nn.Module):
    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Encoder(nn.Module):
    """One task encoder; SOD and COD each own an instance (alpha_s, alpha_c)."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        if self.config.variant == "paper_backbone":
            self.body = ResNet50Backbone(self.config.pretrained_weights_path)
        else:
            self.body = ToyBackbone(self.config.channels)

    def forward(self, x) -> FeaturePyramid:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size must be divisible by 32, got {h}x{w}")
        return FeaturePyramid(self.body(x))


class DilatedHead(nn.Module):
    """Four parallel dilated 3x3 branches, concatenated and fused to 32 channels."""

    def __init__(self, in_channels, out_channels=HEAD_CHANNELS, dilations=DILATIONS):
        super().__init__()
        width = out_channels // len(dilations)
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, width, 3, padding=d, dilation=d) for d in dilations
        )
        self.fuse = nn.Conv2d(width * len(dilations), out_channels, 1)

    def forward(self, x):
        return self.fuse(torch.cat([F.relu(b(x)) for b in self.branches], dim=1))


def gaussian_kernel(size=HA_KERNEL, sigma=HA_SIGMA, dtype=torch.float32):
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    k = torch.outer(g, g)
    return (k / k.sum()).to(dtype)[None, None]


def holistic_attention(pred_logits, feature, kernel=None):
    """Re-weight ``feature`` by ``max(blur(sigmoid(pred)), sigmoid(pred))``.

    ``pred_logits`` is ``[N, 1, h, w]`` and is resized to the feature size first.
    """
    att = torch.sigmoid(resize_tensor(pred_logits, feature.shape[-2:]))
    if kernel is None:
        kernel = gaussian_kernel(dtype=att.dtype)
    kernel = kernel.to(att)
    soft = F.conv2d(att, kernel, padding=kernel.shape[-1] // 2)
    return feature * torch.maximum(soft, att)


class Classifier(nn.Module):
    def __init__(self, channels=HEAD_CHANNELS):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.out = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        return self.out(F.relu(self.conv2(F.relu(self.conv1(x)))))


@dataclass
class DecoderOutput:
    """Logits at input resolution; ``refined`` is the canonical prediction."""

    initial_logits: torch.Tensor
    refined_logits: torch.Tensor

    @property
    def initial_pred(self):
        return torch.sigmoid(self.initial_logits)

    @property
    def refined_pred(self):
        return torch.sigmoid(self.refined_logits)


class Decoder(nn.Module):
    """Shared decoder (beta): dilated heads, top-down residual fusion, classifier, holistic attention."""

    def __init__(self, in_channels, channels=HEAD_CHANNELS):
        super().__init__()
        self.heads = nn.ModuleList(DilatedHead(c, channels) for c in in_channels)
        # index k fuses group k (0-based) with the decoded group k+1
        self.lateral = nn.ModuleList(ResidualBlock(channels) for _ in range(3))
        self.merge = nn.ModuleList(ResidualBlock(channels) for _ in range(3))
        self.top = ResidualBlock(channels)
        self.classifier = Classifier(channels)
        self.register_buffer("ha_kernel", gaussian_kernel(), persistent=False)

    def dilated_head(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        return FeaturePyramid([head(f) for head, f in zip(self.heads, pyramid)])

    def fuse(self, heads: FeaturePyramid):
        if len(heads) != 4 or any(c != self.classifier.conv1.in_channels for c in heads.channels):
            raise ValueError(f"decoder expects 4 groups of {self.classifier.conv1.in_channels} channels")
        x = self.top(heads[3])
        for k in (2, 1, 0):
            low = heads[k]
            x = self.lateral[k](low) + resize_tensor(x, low.shape[-2:])
            x = self.merge[k](x)
        return x

    def decode(self, heads: FeaturePyramid, out_size) -> DecoderOutput:
        fused = self.fuse(heads)
        init = self.classifier(fused)
        refined = self.classifier(holistic_attention(init, fused, self.ha_kernel))
        return DecoderOutput(resize_tensor(init, out_size), resize_tensor(refined, out_size))

    def forward(self, pyramid: FeaturePyramid, out_size) -> DecoderOutput:
        return self.decode(self.dilated_head(pyramid), out_size)


class Generator(nn.Module):
    """Both encoders plus the shared decoder."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        config = config or EncoderConfig()
        self.config = config
        self.encoder_s = Encoder(config)
        self.encoder_c = Encoder(config)
        self.decoder = Decoder(config.channels)

    def encoder(self, task):
        task = getattr(task, "value", task)
        if task == "sod":
            return self.encoder_s
        if task == "cod":
            return self.encoder_c
        raise ValueError(f"no encoder for task {task!r}")

    def forward(self, x, task) -> DecoderOutput:
        return self.decoder(self.encoder(task)(x), x.shape[-2:])


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def init_zero_(module: nn.Module):
    for p in module.parameters():
        nn.init.zeros_(p)
    return module
