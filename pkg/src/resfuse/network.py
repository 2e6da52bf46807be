"""The dual-branch multi-scale encoder-decoder.

Main branch = post-contrast volume, auxiliary branch = pre-contrast.
Every encoder level applies one shared EncodingBlock to both branches,
fuses per the configured variant, then 2×2×2 max-pools both branches.
The decoder consumes only the fused main-branch skips: nearest up2, a
3×3×3 conv, concatenation with the skip, an EncodingBlock, and finally
a 1×1×1 conv to class logits at full input resolution.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict, field

import numpy as np

from . import ops
from .fusion import EncodingBlock, FusionWeightBlock, encode_level, residual_plain, VARIANTS
from .optim import AdamState
from .params import ParamSet, he_conv
from .tensor import Tensor, ShapeError, concat, relu

CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass
class ModelConfig:
    levels: int = 3
    base_channels: int = 8
    variant: str = "weighted"
    in_channels_per_branch: int = 1
    num_classes: int = 2
    aux_descends_fused: bool = False
    fusion_zero_init: bool = False
    seed: int = 0

    def validate(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.num_classes < 1 or self.in_channels_per_branch < 1:
            raise ValueError("channel and class counts must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def channels_at(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


class DualBranchSegNet:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params = ParamSet()
        rng = np.random.default_rng(config.seed)
        L = config.levels
        enc_in = [config.in_channels_per_branch] + [config.channels_at(i) for i in range(L - 1)]
        self.enc: list[EncodingBlock] = []
        self.fuse: list[FusionWeightBlock | None] = []
        for l in range(L):
            c = config.channels_at(l)
            self.enc.append(EncodingBlock.build(self.params, f"enc.{l}", enc_in[l], c, rng))
            if config.variant == "weighted":
                self.fuse.append(FusionWeightBlock.build(
                    self.params, f"fuse.{l}", c, zero_init=config.fusion_zero_init))
            else:
                self.fuse.append(None)
        self.dec = []
        for l in range(L - 2, -1, -1):
            c_hi, c = config.channels_at(l + 1), config.channels_at(l)
            up_w = self.params.add(f"dec.{l}.up.weight",
                                   Tensor(he_conv(rng, c, c_hi, 3))).value
            up_b = self.params.add(f"dec.{l}.up.bias",
                                   Tensor(np.zeros(c, dtype=np.float32))).value
            up_g = self.params.add(f"dec.{l}.upnorm.gamma",
                                   Tensor(np.ones(c, dtype=np.float32))).value
            up_bt = self.params.add(f"dec.{l}.upnorm.beta",
                                    Tensor(np.zeros(c, dtype=np.float32))).value
            block = EncodingBlock.build(self.params, f"dec.{l}.block", 2 * c, c, rng)
            self.dec.append((l, up_w, up_b, up_g, up_bt, block))
        c0, k = config.base_channels, config.num_classes
        head_w = (rng.standard_normal((k, c0, 1, 1, 1)) * np.sqrt(2.0 / c0)).astype(np.float32)
        self.head_w = self.params.add("head.weight", Tensor(head_w)).value
        self.head_b = self.params.add("head.bias", Tensor(np.zeros(k, dtype=np.float32))).value

    # -- inference -----------------------------------------------------------

    def _check_input(self, t: Tensor, name: str):
        if t.data.ndim != 5:
            raise ShapeError(f"{name}: expected (N,C,D,H,W), got {tuple(t.shape)}")
        if t.shape[1] != self.config.in_channels_per_branch:
            raise ShapeError(f"{name}: expected {self.config.in_channels_per_branch} "
                             f"channels, got {t.shape[1]}")
        div = 2 ** (self.config.levels - 1)
        for i, s in enumerate(t.shape[2:]):
            if s % div:
                raise ShapeError(f"{name}: spatial dim {i} = {s} not divisible by {div}")

    def forward(self, pre: Tensor, post: Tensor) -> Tensor:
        """Logits (N, num_classes, D, H, W); main branch is ``post``."""
        self._check_input(post, "post")
        cfg = self.config
        plain = cfg.variant == "plain"
        if not plain:
            self._check_input(pre, "pre")
            if pre.shape != post.shape:
                raise ShapeError(f"pre/post shapes differ: {pre.shape} vs {post.shape}")
        m, a = post, pre
        skips = []
        for l in range(cfg.levels):
            if plain:
                # the auxiliary input is ignored entirely; skip its compute
                m = residual_plain(m, self.enc[l])
                skips.append(m)
            else:
                m, a, s = encode_level(m, a, self.enc[l], self.fuse[l], cfg.variant,
                                       aux_descends_fused=cfg.aux_descends_fused)
                skips.append(s)
            if l < cfg.levels - 1:
                m = ops.resample(m, "down2")
                if not plain:
                    a = ops.resample(a, "down2")
        x = m
        for l, up_w, up_b, up_g, up_bt, block in self.dec:
            x = ops.resample(x, "up2")
            x = relu(ops.instance_norm(ops.conv3d(x, up_w, up_b, stride=1, padding=1),
                                       up_g, up_bt))
            x = concat([x, skips[l]], axis=1)
            x = relu(block.forward(x))
        return ops.conv1x1x1(x, self.head_w, self.head_b)

    def param_count(self, trainable_only: bool = False) -> int:
        return self.params.count(trainable_only=trainable_only)

    def zero_grad(self):
        self.params.zero_grad()


def build(config: ModelConfig) -> DualBranchSegNet:
    return DualBranchSegNet(config)


def fusion_param_overhead(config: ModelConfig) -> int:
    """Closed-form parameter count of all fusion blocks: Σ_l (C_l² + C_l)."""
    return sum(config.channels_at(l) ** 2 + config.channels_at(l)
               for l in range(config.levels))


# -- checkpoint serialization ------------------------------------------------
#
# Little-endian layout:
#   magic "RFCK" | version u32 | json_len u32 | config+state JSON (UTF-8)
#   | param_count u32 | per param: name_len u32, name, rank u8, dims u32...,
#   float32 data | opt_count u32 | same per-entry layout for optimizer
#   moments | crc32 u32 over everything before it.

def _pack_entry(out: bytearray, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    out += struct.pack("<I", len(nb))
    out += nb
    out += struct.pack("<B", arr.ndim)
    for d in arr.shape:
        out += struct.pack("<I", d)
    out += np.ascontiguousarray(arr, dtype=np.float32).tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def entry(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u8()
        dims = tuple(self.u32() for _ in range(rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims)
        return name, arr.copy()


def checkpoint_save(net: DualBranchSegNet, path, opt_state: AdamState | None = None,
                    epoch: int = 0):
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    meta = {"config": net.config.to_dict(), "epoch": int(epoch),
            "adam_step": int(opt_state.step) if opt_state else 0}
    mjson = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(mjson))
    blob += mjson
    names = net.params.names()
    blob += struct.pack("<I", len(names))
    for name in names:
        _pack_entry(blob, name, net.params[name].value.data)
    opt_entries = []
    if opt_state is not None:
        for name in sorted(opt_state.m):
            opt_entries.append((name + ".m", opt_state.m[name]))
            opt_entries.append((name + ".v", opt_state.v[name]))
    blob += struct.pack("<I", len(opt_entries))
    for name, arr in opt_entries:
        _pack_entry(blob, name, arr)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def checkpoint_load(path, expected_config: ModelConfig | None = None):
    """Rebuild the net and optimizer state from ``path``.

    Returns ``(net, opt_state, epoch)``. Nothing is mutated on error.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint file")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(buf[:-4])
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    config = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        raise CheckpointError("checkpoint config does not match the expected config")
    net = DualBranchSegNet(config)
    n_params = r.u32()
    loaded = {}
    for _ in range(n_params):
        name, arr = r.entry()
        loaded[name] = arr
    if set(loaded) != set(net.params.names()):
        missing = set(net.params.names()) - set(loaded)
        extra = set(loaded) - set(net.params.names())
        raise CheckpointError(f"parameter set mismatch (missing={sorted(missing)}, "
                              f"unknown={sorted(extra)})")
    for name, arr in loaded.items():
        tgt = net.params[name].value
        if arr.shape != tgt.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"expected {tgt.data.shape}")
        tgt.data[...] = arr
    opt_state = AdamState()
    opt_state.step = int(meta.get("adam_step", 0))
    for _ in range(r.u32()):
        name, arr = r.entry()
        base, kind = name.rsplit(".", 1)
        if kind == "m":
            opt_state.m[base] = arr
        elif kind == "v":
            opt_state.v[base] = arr
        else:
            raise CheckpointError(f"unknown optimizer entry {name!r}")
    return net, opt_state, int(meta.get("epoch", 0))
