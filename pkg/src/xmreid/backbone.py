"""Two-stream convolutional feature extractor.

The shallow stage(s) are modality specific to capture low-level patterns
of each spectrum; the deeper stages share parameters. The toy variant
keeps that topology at desk scale:

    stage i: Conv3x3(s=1, p=1, no bias) -> GroupNorm(1 group) -> ReLU
             -> Conv3x3(s=2, p=1, no bias)          # stride 1 in the last stage
             -> GroupNorm(1 group) -> ReLU

With stage_channels (16, 32, 64, 128) and a 72x36 input the feature map
is 9x5 (three ceil-halvings, last stage at stride 1). Normalization
inside the conv stages uses per-sample group statistics, so outputs are
independent of batch composition and activations stay bounded under the
aggressive 0.1 SGD schedule; the single shared embedding BatchNorm in
FeatureEmbed is a true batch norm.
"""

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError, ModelError

TOY = "toy"
RESNET50_ADAPTER = "resnet50-adapter"


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = TOY
    stage_channels: tuple = (16, 32, 64, 128)
    shared_from_stage: int = 1
    last_stage_stride: int = 1

    def validate(self):
        if self.variant not in (TOY, RESNET50_ADAPTER):
            raise ConfigurationError("unknown backbone variant %r" % self.variant)
        if self.last_stage_stride != 1:
            raise ConfigurationError("last_stage_stride must be 1")
        if self.variant == TOY:
            if len(self.stage_channels) < 2:
                raise ConfigurationError("toy backbone needs >= 2 stages")
            if any(c < 1 for c in self.stage_channels):
                raise ConfigurationError("stage_channels must be positive")
            if not 1 <= self.shared_from_stage < len(self.stage_channels):
                raise ConfigurationError(
                    "shared_from_stage must be in [1, %d)" % len(self.stage_channels)
                )

    @property
    def feature_dim(self):
        if self.variant == RESNET50_ADAPTER:
            return 2048
        return self.stage_channels[-1]


def _toy_stage(in_channels, out_channels, down_stride):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=1, padding=1, bias=False),
        nn.GroupNorm(1, out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, stride=down_stride, padding=1, bias=False),
        nn.GroupNorm(1, out_channels),
        nn.ReLU(inplace=True),
    )


def _toy_stages(config):
    stages = []
    in_channels = 3
    last = len(config.stage_channels) - 1
    for i, out_channels in enumerate(config.stage_channels):
        stride = config.last_stage_stride if i == last else 2
        stages.append(_toy_stage(in_channels, out_channels, stride))
        in_channels = out_channels
    return stages


def _resnet50_parts(config):
    # shape/contract adapter only; no pretrained weights are shipped
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.layer4[0].conv2.stride = (1, 1)
    net.layer4[0].downsample[0].stride = (1, 1)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    body = nn.Sequential(net.layer1, net.layer2, net.layer3, net.layer4)
    return [stem], [body]


class TwoStreamBackbone(nn.Module):
    """Route each sample through its modality-specific shallow stream, then
    through the shared deep stages, preserving input order."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        if config.variant == TOY:
            stages = _toy_stages(config)
            specific = stages[:config.shared_from_stage]
            shared = stages[config.shared_from_stage:]
        else:
            specific, shared = _resnet50_parts(config)
        self.visible_stream = nn.Sequential(*specific)
        self.infrared_stream = copy.deepcopy(self.visible_stream)
        self.shared = nn.Sequential(*shared)

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def forward(self, images, visible_mask):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ModelError("expected images of shape (K, 3, H, W), got %s" % (tuple(images.shape),))
        if visible_mask.shape[0] != images.shape[0]:
            raise ModelError("modality mask length does not match batch size")
        pieces, positions = [], []
        if bool(visible_mask.any()):
            pieces.append(self.visible_stream(images[visible_mask]))
            positions.append(visible_mask.nonzero(as_tuple=True)[0])
        if bool((~visible_mask).any()):
            pieces.append(self.infrared_stream(images[~visible_mask]))
            positions.append((~visible_mask).nonzero(as_tuple=True)[0])
        merged = torch.cat(pieces, dim=0)
        order = torch.argsort(torch.cat(positions))
        return self.shared(merged[order])


class FeatureEmbed(nn.Module):
    """Global average pooling plus the shared batch-normalized embedding."""

    def __init__(self, dim):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)

    def forward(self, fmap):
        pooled = fmap.mean(dim=(2, 3))
        return pooled, self.bn(pooled)
