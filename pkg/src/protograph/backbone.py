"""Volumetric feature extractor: patch embedding plus full-convolution blocks.

The extractor follows the ConvMixer pattern: a strided patch-embedding
convolution lifts the single-channel volume to ``channels`` feature maps,
then ``depth`` blocks each apply a depthwise convolution (grouped, one group
per channel) inside a residual connection followed by a pointwise (1x1x1)
channel-mixing convolution.  ReLU is used after both stages; no
normalization layers are inserted (training at much larger widths than the
desk-scale defaults may want them).

A learned 1x1x1 "squeeze" convolution reduces the feature stack to a single
global channel for the classifier head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, conv3d, relu


@dataclass
class BackboneConfig:
    in_channels: int = 1
    channels: int = 32
    depth: int = 2
    kernel: int = 5
    patch_stride: int = 2

    def validate(self) -> None:
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if min(self.in_channels, self.channels, self.depth, self.patch_stride) < 1:
            raise ValueError("backbone config fields must be positive")


@dataclass
class MixerBlockParams:
    depthwise_w: Tensor
    depthwise_b: Tensor
    pointwise_w: Tensor
    pointwise_b: Tensor


@dataclass
class BackboneParams:
    """All learnable tensors of the extractor, shapes fixed by a config."""

    patch_w: Tensor
    patch_b: Tensor
    blocks: list[MixerBlockParams] = field(default_factory=list)
    squeeze_w: Tensor = None
    squeeze_b: Tensor = None


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    """He-style initialization; biases start at zero."""
    config.validate()
    c, k = config.channels, config.kernel

    def he(shape, fan_in):
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params = BackboneParams(
        patch_w=he((c, config.in_channels, k, k, k), config.in_channels * k ** 3),
        patch_b=zeros((c,)),
        squeeze_w=he((1, c, 1, 1, 1), c),
        squeeze_b=zeros((1,)),
    )
    for _ in range(config.depth):
        params.blocks.append(MixerBlockParams(
            depthwise_w=he((c, 1, k, k, k), k ** 3),
            depthwise_b=zeros((c,)),
            pointwise_w=he((c, c, 1, 1, 1), c),
            pointwise_b=zeros((c,)),
        ))
    return params


def patch_embed(volume: Tensor, params: BackboneParams, config: BackboneConfig) -> Tensor:
    """Strided k^3 convolution lifting the volume to ``channels`` maps."""
    return conv3d(volume, params.patch_w, params.patch_b,
                  stride=config.patch_stride, padding=config.kernel // 2, groups=1)


def mixer_block(x: Tensor, block: MixerBlockParams, config: BackboneConfig) -> Tensor:
    """relu(x + depthwise(x)) followed by relu(pointwise(.)); shape preserved."""
    c = x.shape[0]
    pad = config.kernel // 2
    spatial = relu(add(x, conv3d(x, block.depthwise_w, block.depthwise_b,
                                 stride=1, padding=pad, groups=c)))
    return relu(conv3d(spatial, block.pointwise_w, block.pointwise_b,
                       stride=1, padding=0, groups=1))


def backbone_forward(volume: Tensor, params: BackboneParams,
                     config: BackboneConfig) -> Tensor:
    """Patch embedding followed by ``depth`` mixer blocks."""
    x = patch_embed(volume, params, config)
    for block in params.blocks:
        x = mixer_block(x, block, config)
    return x


def channel_squeeze(features: Tensor, params: BackboneParams) -> Tensor:
    """Learned 1x1x1 reduction of the channel stack to one global map."""
    return conv3d(features, params.squeeze_w, params.squeeze_b,
                  stride=1, padding=0, groups=1)


def backbone_param_list(params: BackboneParams) -> list[tuple[str, Tensor]]:
    """Stable (name, tensor) listing used by the optimizer and checkpoints."""
    items = [("patch_w", params.patch_w), ("patch_b", params.patch_b)]
    for i, blk in enumerate(params.blocks):
        items += [
            (f"block{i}.depthwise_w", blk.depthwise_w),
            (f"block{i}.depthwise_b", blk.depthwise_b),
            (f"block{i}.pointwise_w", blk.pointwise_w),
            (f"block{i}.pointwise_b", blk.pointwise_b),
        ]
    items += [("squeeze_w", params.squeeze_w), ("squeeze_b", params.squeeze_b)]
    return items
