"""Small trainable convolutional encoder producing a stride-4 fused feature map.

Three 3x3 conv stages downsample to strides 4/8/16 with channel widths
c/2c/4c; each stage is projected by a 1x1 conv (to d/2, d/4, d/4 channels),
the coarser two are bilinearly upsampled back to stride 4, and the
concatenation is fused by a final 1x1 conv to d channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Conv:
    w: Tensor
    b: Tensor


@dataclass
class EncoderParams:
    stem: Conv          # 3 -> c, stride 2
    stage1: Conv        # c -> c, stride 2 (stride 4 total)
    stage2: Conv        # c -> 2c, stride 2 (stride 8)
    stage3: Conv        # 2c -> 4c, stride 2 (stride 16)
    proj1: Conv         # 1x1, c -> d/2
    proj2: Conv         # 1x1, 2c -> d/4
    proj3: Conv         # 1x1, 4c -> d/4
    fuse: Conv          # 1x1, d -> d
    channels: int = 16
    dim: int = 64


@dataclass
class FeatureMap:
    o: Tensor                    # (d, H/4, W/4)
    stride: int = 4
    frame_index: int = -1

    @property
    def dim(self) -> int:
        return self.o.shape[0]

    @property
    def height(self) -> int:
        return self.o.shape[1]

    @property
    def width(self) -> int:
        return self.o.shape[2]


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> Conv:
    fan_in = cin * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
    return Conv(Tensor(w.astype(dtype), requires_grad=True),
                Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))


def init_encoder(rng: np.random.Generator, channels: int = 16, dim: int = 64,
                 dtype=np.float32) -> EncoderParams:
    if dim % 4 != 0:
        raise ValueError(f"feature dim must be divisible by 4, got {dim}")
    c = channels
    return EncoderParams(
        stem=_conv_init(rng, c, 3, 3, dtype),
        stage1=_conv_init(rng, c, c, 3, dtype),
        stage2=_conv_init(rng, 2 * c, c, 3, dtype),
        stage3=_conv_init(rng, 4 * c, 2 * c, 3, dtype),
        proj1=_conv_init(rng, dim // 2, c, 1, dtype),
        proj2=_conv_init(rng, dim // 4, 2 * c, 1, dtype),
        proj3=_conv_init(rng, dim // 4, 4 * c, 1, dtype),
        fuse=_conv_init(rng, dim, dim, 1, dtype),
        channels=channels,
        dim=dim,
    )


def upsample_bilinear(fm: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear upsampling of a (C, h, w) map (half-pixel grid)."""
    c, h, w = fm.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    coords = Tensor(np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
                    .astype(fm.data.dtype))
    sampled = T.bilinear_sample(fm, coords)               # (out_h*out_w, C)
    return T.reshape(T.transpose(sampled, (1, 0)), (c, out_h, out_w))


def encode(image: Tensor, params: EncoderParams, frame_index: int = -1) -> FeatureMap:
    """Image (3, H, W) in [0, 1] -> FeatureMap (d, H/4, W/4); H, W % 16 == 0."""
    _, h, w = image.shape
    if h % 16 != 0 or w % 16 != 0:
        raise T.ShapeError(f"encode: H and W must be divisible by 16, got {h}x{w}")
    x2 = T.relu(T.conv2d(image, params.stem.w, params.stem.b, stride=2, padding=1))
    s4 = T.relu(T.conv2d(x2, params.stage1.w, params.stage1.b, stride=2, padding=1))
    s8 = T.relu(T.conv2d(s4, params.stage2.w, params.stage2.b, stride=2, padding=1))
    s16 = T.relu(T.conv2d(s8, params.stage3.w, params.stage3.b, stride=2, padding=1))

    p4 = T.conv2d(s4, params.proj1.w, params.proj1.b, stride=1, padding=0)
    p8 = T.conv2d(s8, params.proj2.w, params.proj2.b, stride=1, padding=0)
    p16 = T.conv2d(s16, params.proj3.w, params.proj3.b, stride=1, padding=0)

    th, tw = h // 4, w // 4
    up8 = upsample_bilinear(p8, th, tw)
    up16 = upsample_bilinear(p16, th, tw)
    fused = T.conv2d(T.concat([p4, up8, up16], axis=0),
                     params.fuse.w, params.fuse.b, stride=1, padding=0)
    return FeatureMap(o=fused, stride=4, frame_index=frame_index)


def encode_batch(images: Tensor, params: EncoderParams,
                 frame_indices: list[int] | None = None) -> list[FeatureMap]:
    """Encode a (B, 3, H, W) stack in one pass and split it per frame.

    Numerically identical math to encode(); batching just amortizes the op
    overhead across frames (weights are shared and fixed within a step).
    """
    bsz, _, h, w = images.shape
    if h % 16 != 0 or w % 16 != 0:
        raise T.ShapeError(f"encode: H and W must be divisible by 16, got {h}x{w}")
    x2 = T.relu(T.conv2d(images, params.stem.w, params.stem.b, stride=2, padding=1))
    s4 = T.relu(T.conv2d(x2, params.stage1.w, params.stage1.b, stride=2, padding=1))
    s8 = T.relu(T.conv2d(s4, params.stage2.w, params.stage2.b, stride=2, padding=1))
    s16 = T.relu(T.conv2d(s8, params.stage3.w, params.stage3.b, stride=2, padding=1))

    p4 = T.conv2d(s4, params.proj1.w, params.proj1.b, stride=1, padding=0)
    p8 = T.conv2d(s8, params.proj2.w, params.proj2.b, stride=1, padding=0)
    p16 = T.conv2d(s16, params.proj3.w, params.proj3.b, stride=1, padding=0)

    th, tw = h // 4, w // 4
    # upsampling is per-channel, so the batch folds into the channel axis
    c8 = p8.shape[1]
    c16 = p16.shape[1]
    up8 = T.reshape(upsample_bilinear(
        T.reshape(p8, (bsz * c8, h // 8, w // 8)), th, tw), (bsz, c8, th, tw))
    up16 = T.reshape(upsample_bilinear(
        T.reshape(p16, (bsz * c16, h // 16, w // 16)), th, tw), (bsz, c16, th, tw))
    fused = T.conv2d(T.concat([p4, up8, up16], axis=1),
                     params.fuse.w, params.fuse.b, stride=1, padding=0)
    if frame_indices is None:
        frame_indices = list(range(bsz))
    return [FeatureMap(o=o, stride=4, frame_index=fi)
            for o, fi in zip(T.unstack(fused), frame_indices)]
