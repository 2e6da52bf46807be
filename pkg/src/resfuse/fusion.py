"""Residual encoding blocks and the dual-branch fusion step.

An :class:`EncodingBlock` computes E(x) = norm2(conv2(relu(norm1(conv1(x))))).
Three variants decide what gets added to E of the main branch before the
block-final ReLU:

* ``plain``    — a classic residual skip of the block's own input,
* ``direct``   — the auxiliary branch's features, added as-is,
* ``weighted`` — the auxiliary features passed through a learned 1×1×1
  channel-mixing block first.

Both branches share the same encoding parameters; only the fusion block
is extra, which is what keeps the parameter overhead marginal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .params import ParamSet, he_conv
from .tensor import Tensor, ShapeError, add, relu, pad_channels

VARIANTS = ("plain", "direct", "weighted")


class EncodingBlock:
    """Two 3×3×3 convs with instance norm; spatial dims preserved."""

    def __init__(self, in_channels: int, out_channels: int,
                 conv1_w, conv1_b, norm1_g, norm1_b,
                 conv2_w, conv2_b, norm2_g, norm2_b):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1_w, self.conv1_b = conv1_w, conv1_b
        self.norm1_g, self.norm1_b = norm1_g, norm1_b
        self.conv2_w, self.conv2_b = conv2_w, conv2_b
        self.norm2_g, self.norm2_b = norm2_g, norm2_b

    @classmethod
    def build(cls, params: ParamSet, prefix: str, cin: int, cout: int,
              rng: np.random.Generator, dtype=np.float32) -> "EncodingBlock":
        def p(name, arr):
            return params.add(f"{prefix}.{name}", Tensor(arr, dtype=dtype)).value

        return cls(
            cin, cout,
            p("conv1.weight", he_conv(rng, cout, cin, 3, dtype)),
            p("conv1.bias", np.zeros(cout, dtype=dtype)),
            p("norm1.gamma", np.ones(cout, dtype=dtype)),
            p("norm1.beta", np.zeros(cout, dtype=dtype)),
            p("conv2.weight", he_conv(rng, cout, cout, 3, dtype)),
            p("conv2.bias", np.zeros(cout, dtype=dtype)),
            p("norm2.gamma", np.ones(cout, dtype=dtype)),
            p("norm2.beta", np.zeros(cout, dtype=dtype)),
        )

    def forward(self, x: Tensor) -> Tensor:
        """E(x): pre-activation output, before any skip/fusion addition."""
        y = ops.conv3d(x, self.conv1_w, self.conv1_b, stride=1, padding=1)
        y = ops.instance_norm(y, self.norm1_g, self.norm1_b)
        y = relu(y)
        y = ops.conv3d(y, self.conv2_w, self.conv2_b, stride=1, padding=1)
        y = ops.instance_norm(y, self.norm2_g, self.norm2_b)
        return y


@dataclass
class FusionWeightBlock:
    """Square 1×1×1 channel-mixing weights applied to auxiliary features."""

    W: Tensor   # (C, C, 1, 1, 1)
    b: Tensor   # (C,)

    @classmethod
    def build(cls, params: ParamSet, prefix: str, channels: int,
              zero_init: bool = False, dtype=np.float32) -> "FusionWeightBlock":
        if zero_init:
            w = np.zeros((channels, channels, 1, 1, 1), dtype=dtype)
        else:
            # identity start: the weighted variant begins exactly equal to
            # direct addition and departs only when training asks it to
            w = np.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1, 1)
        b = np.zeros(channels, dtype=dtype)
        return cls(params.add(f"{prefix}.weight", Tensor(w, dtype=dtype)).value,
                   params.add(f"{prefix}.bias", Tensor(b, dtype=dtype)).value)

    @property
    def channels(self) -> int:
        return self.W.shape[0]


def residual_plain(x: Tensor, block: EncodingBlock, proj=None) -> Tensor:
    """relu(E(x) + skip(x)); skip is identity, a learned 1×1×1 projection,
    or a zero-padded channel lift when no projection is given."""
    y = block.forward(x)
    if proj is not None:
        skip = ops.conv1x1x1(x, proj[0], proj[1] if len(proj) > 1 else None)
    elif block.in_channels == block.out_channels:
        skip = x
    else:
        skip = pad_channels(x, block.out_channels)
    return relu(add(y, skip))


def fuse_direct(e_main: Tensor, x_aux: Tensor) -> Tensor:
    """Plain additive junction; no nonlinearity of its own."""
    require = e_main.shape == x_aux.shape
    if not require:
        raise ShapeError(f"fuse_direct: shape mismatch {e_main.shape} vs {x_aux.shape}")
    return add(e_main, x_aux)


def fuse_weighted(e_main: Tensor, x_aux: Tensor, fw: FusionWeightBlock) -> Tensor:
    """Additive junction with a learned channel reweighting of the
    auxiliary features."""
    if e_main.shape != x_aux.shape:
        raise ShapeError(f"fuse_weighted: shape mismatch {e_main.shape} vs {x_aux.shape}")
    if fw.channels != x_aux.shape[1]:
        raise ShapeError(f"fuse_weighted: block mixes {fw.channels} channels, "
                         f"input has {x_aux.shape[1]}")
    return add(e_main, ops.conv1x1x1(x_aux, fw.W, fw.b))


def encode_level(main_in: Tensor, aux_in: Tensor, block: EncodingBlock,
                 fw: FusionWeightBlock | None, variant: str,
                 aux_descends_fused: bool = False):
    """One encoder level applied to both branches with shared weights.

    Returns ``(main_out, aux_out, skip)`` where ``skip`` (= main_out)
    feeds the decoder at this resolution and both branch outputs descend
    to the next level.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}")
    if main_in.shape != aux_in.shape:
        raise ShapeError(f"encode_level: branch shapes differ "
                         f"({main_in.shape} vs {aux_in.shape})")
    aux_out = block.forward(aux_in)
    if variant == "plain":
        main_out = residual_plain(main_in, block)
    else:
        e_main = block.forward(main_in)
        if variant == "direct":
            main_out = relu(fuse_direct(e_main, aux_out))
        else:
            if fw is None:
                raise ValueError("encode_level: weighted variant needs a FusionWeightBlock")
            main_out = relu(fuse_weighted(e_main, aux_out, fw))
    if aux_descends_fused:
        aux_out = main_out
    return main_out, aux_out, main_out
