"""Shared feature extractors producing one pooled vector f(x) per sample."""

from __future__ import annotations

import numpy as np

from .nn import Linear, Module
from .tensor import DimensionError, Tensor, gelu, im2col, reshape


class MLPBackbone(Module):
    """Flatten -> (Linear, GELU) per hidden width -> Linear to ``d``."""

    variant = "mlp"

    def __init__(self, in_dim: int, d: int, rng: np.random.Generator, widths=(256, 256)):
        self.in_dim = int(in_dim)
        self.output_dim = int(d)
        self.widths = tuple(int(w) for w in widths)
        dims = (self.in_dim, *self.widths)
        self.hidden = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], self.output_dim, rng)

    def __call__(self, x) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"mlp backbone expects {self.in_dim} inputs per sample, got {x.shape[1]}")
        h = Tensor(x)
        for layer in self.hidden:
            h = gelu(layer(h))
        return self.out(h)


class ConvBackbone(Module):
    """Two 3x3 stride-2 convs (GELU) via im2col, flatten, Linear to ``d``.

    Input is [B, 1, H, W]; activations are kept channels-last internally.
    """

    variant = "conv2"

    def __init__(self, in_shape, d: int, rng: np.random.Generator, channels=(16, 32)):
        c, h, w = (int(s) for s in in_shape)
        self.in_shape = (c, h, w)
        self.output_dim = int(d)
        self.channels = tuple(int(ch) for ch in channels)
        convs = []
        cin = c
        for cout in self.channels:
            convs.append(Linear(9 * cin, cout, rng))
            h, w = (h + 1) // 2, (w + 1) // 2
            cin = cout
        self.convs = convs
        self.flat_dim = h * w * cin
        self.out = Linear(self.flat_dim, self.output_dim, rng)

    def __call__(self, x) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise DimensionError(f"conv2 backbone expects [B, {', '.join(map(str, self.in_shape))}], got {x.shape}")
        h = Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))
        for conv in self.convs:
            h = gelu(conv(im2col(h, 3, 2, 1)))
        return self.out(reshape(h, (h.shape[0], -1)))


def make_backbone(variant: str, input_shape, d: int, rng: np.random.Generator, widths=(256, 256)) -> Module:
    if variant == "mlp":
        return MLPBackbone(int(np.prod(input_shape)), d, rng, widths)
    if variant == "conv2":
        shape = tuple(input_shape)
        if len(shape) == 2:
            shape = (1, *shape)
        return ConvBackbone(shape, d, rng)
    raise ValueError(f"unknown backbone variant {variant!r}")


def detach_features(f: Tensor) -> Tensor:
    """Value-equal copy cut from the graph; gradients never reach the backbone."""
    return Tensor(f.data.copy())
