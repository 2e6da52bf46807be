"""Synthetic pre-/post-contrast phantom volumes.

Each sample contains ellipsoidal blobs of three tissue kinds on a flat
background: lesions (dark-ish before contrast, strongly enhancing),
cysts (dark, non-enhancing) and glands (bright-ish before contrast,
mildly enhancing). The intensity bands and enhancement factors are tuned
so that lesion and gland land at the *same* post-contrast intensity:
a segmenter that sees only the post volume cannot tell them apart, while
the (pre, post) pair separates them linearly. That designed ambiguity is
the whole point of the dataset.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from scipy import ndimage

VOLUME_MAGIC = b"RFSV"
VOLUME_VERSION = 1

LABEL_BACKGROUND = 0
LABEL_LESION = 1
LABEL_CYST = 2
LABEL_GLAND = 3


class VolumeFormatError(ValueError):
    """Bad magic, dtype code, dims, or truncated volume file."""


class PlacementError(RuntimeError):
    """Could not place the requested blobs without overlap."""


@dataclass
class PhantomSpec:
    size: tuple = (32, 32, 32)
    lesion_count: tuple = (1, 3)
    cyst_count: tuple = (1, 3)
    gland_count: tuple = (1, 3)
    radius_range: tuple = (3.0, 6.0)
    axis_ratio_range: tuple = (0.6, 1.4)
    background: float = 0.20
    gland_pre: float = 0.55
    lesion_pre: float = 0.30
    cyst_pre: float = 0.10
    lesion_enhancement: float = 2.2
    gland_enhancement: float = 1.2
    cyst_enhancement: float = 1.0
    background_enhancement: float = 1.0
    noise_sigma: float = 0.03
    max_place_attempts: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("size", "lesion_count", "cyst_count", "gland_count",
                    "radius_range", "axis_ratio_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Sample:
    pre: np.ndarray      # float32 (D,H,W)
    post: np.ndarray     # float32 (D,H,W)
    labels: np.ndarray   # uint8 (D,H,W), values in {0..3}

    @property
    def lesion_mask(self) -> np.ndarray:
        return self.labels == LABEL_LESION


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _place_blobs(rng, shape, labels, count, label_value, spec: PhantomSpec):
    rlo, rhi = spec.radius_range
    alo, ahi = spec.axis_ratio_range
    for _ in range(count):
        for attempt in range(spec.max_place_attempts):
            base = rng.uniform(rlo, rhi)
            radii = base * rng.uniform(alo, ahi, size=3)
            center = [rng.uniform(r + 1.0, s - r - 1.0) if s > 2 * (r + 1.0) else s / 2.0
                      for s, r in zip(shape, radii)]
            mask = _ellipsoid_mask(shape, center, radii)
            if not mask.any():
                continue
            if not (labels[mask] != LABEL_BACKGROUND).any():
                labels[mask] = label_value
                break
        else:
            raise PlacementError(
                f"could not place blob with label {label_value} after "
                f"{spec.max_place_attempts} attempts; reduce counts or radii")


def generate(spec: PhantomSpec, seed: int) -> Sample:
    """Deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    shape = tuple(spec.size)
    labels = np.zeros(shape, dtype=np.uint8)
    counts = {
        LABEL_LESION: int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1)),
        LABEL_CYST: int(rng.integers(spec.cyst_count[0], spec.cyst_count[1] + 1)),
        LABEL_GLAND: int(rng.integers(spec.gland_count[0], spec.gland_count[1] + 1)),
    }
    for value, count in counts.items():
        _place_blobs(rng, shape, labels, count, value, spec)

    pre_band = {
        LABEL_BACKGROUND: spec.background,
        LABEL_LESION: spec.lesion_pre,
        LABEL_CYST: spec.cyst_pre,
        LABEL_GLAND: spec.gland_pre,
    }
    enhancement = {
        LABEL_BACKGROUND: spec.background_enhancement,
        LABEL_LESION: spec.lesion_enhancement,
        LABEL_CYST: spec.cyst_enhancement,
        LABEL_GLAND: spec.gland_enhancement,
    }
    pre = np.zeros(shape, dtype=np.float64)
    post = np.zeros(shape, dtype=np.float64)
    for value, band in pre_band.items():
        region = labels == value
        pre[region] = band
        post[region] = band * enhancement[value]

    # one pass of 3^3 box blur to soften the blob edges
    pre = ndimage.uniform_filter(pre, size=3, mode="nearest")
    post = ndimage.uniform_filter(post, size=3, mode="nearest")
    if spec.noise_sigma > 0:
        pre = pre + rng.normal(0.0, spec.noise_sigma, size=shape)
        post = post + rng.normal(0.0, spec.noise_sigma, size=shape)
    pre = np.clip(pre, 0.0, 2.0).astype(np.float32)
    post = np.clip(post, 0.0, 2.0).astype(np.float32)
    return Sample(pre=pre, post=post, labels=labels)


def subtraction(pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """post − pre, unclipped; inspection export only, never a network input."""
    if pre.shape != post.shape:
        raise ValueError(f"subtraction: shape mismatch {pre.shape} vs {post.shape}")
    return post.astype(np.float32) - pre.astype(np.float32)


# -- volume file format ------------------------------------------------------
#
# Little-endian: "RFSV" | version u32 | dtype u8 (0=float32, 1=uint8) |
# rank u8 | dims u32 each | raw data | crc32 u32.

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("uint8")}


def volume_write(path, array: np.ndarray):
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.uint8:
        code = 1
    else:
        raise VolumeFormatError(f"unsupported dtype {arr.dtype}; use float32 or uint8")
    if arr.ndim > 255 or any(d > 0xFFFFFFFF for d in arr.shape):
        raise VolumeFormatError("rank or dims overflow the header fields")
    blob = bytearray()
    blob += VOLUME_MAGIC
    blob += struct.pack("<I", VOLUME_VERSION)
    blob += struct.pack("<BB", code, arr.ndim)
    for d in arr.shape:
        blob += struct.pack("<I", d)
    blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def volume_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 14:
        raise VolumeFormatError("truncated volume file")
    if buf[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f"bad magic {buf[:4]!r}, expected {VOLUME_MAGIC!r}")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise VolumeFormatError("volume CRC mismatch")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"unsupported volume version {version}")
    code, rank = buf[8], buf[9]
    if code not in _DTYPE_CODES:
        raise VolumeFormatError(f"unknown dtype code {code}")
    pos = 10
    if len(buf) < pos + 4 * rank + 4:
        raise VolumeFormatError("truncated volume header")
    dims = struct.unpack(f"<{rank}I", buf[pos:pos + 4 * rank]) if rank else ()
    pos += 4 * rank
    dtype = _DTYPE_CODES[code]
    n = int(np.prod(dims)) if rank else 1
    expected = pos + n * dtype.itemsize + 4
    if len(buf) != expected:
        raise VolumeFormatError(f"volume payload length {len(buf)} != expected {expected}")
    return np.frombuffer(buf[pos:pos + n * dtype.itemsize], dtype=dtype).reshape(dims).copy()


# -- dataset directories -----------------------------------------------------

def case_paths(directory, index: int) -> dict:
    d = Path(directory)
    return {
        "pre": d / f"case_{index}_pre.rfsv",
        "post": d / f"case_{index}_post.rfsv",
        "labels": d / f"case_{index}_labels.rfsv",
    }


def write_dataset(directory, cases: int, seed: int, spec: PhantomSpec | None = None,
                  train_fraction: float = 0.75) -> dict:
    """Generate ``cases`` samples into ``directory`` with a manifest.

    Case ``i`` uses seed ``seed + i``; the train/val split is by case,
    fixed in the manifest.
    """
    spec = spec or PhantomSpec()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    indices = list(range(cases))
    for i in indices:
        sample = generate(spec, seed + i)
        paths = case_paths(d, i)
        volume_write(paths["pre"], sample.pre)
        volume_write(paths["post"], sample.post)
        volume_write(paths["labels"], sample.labels)
    n_train = int(round(cases * train_fraction))
    manifest = {
        "spec": spec.to_dict(),
        "seed": seed,
        "cases": indices,
        "train": indices[:n_train],
        "val": indices[n_train:],
    }
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("cases", "train", "val"):
        if key not in manifest:
            raise VolumeFormatError(f"manifest missing {key!r}")
    return manifest


def load_case(directory, index: int) -> Sample:
    paths = case_paths(directory, index)
    return Sample(pre=volume_read(paths["pre"]),
                  post=volume_read(paths["post"]),
                  labels=volume_read(paths["labels"]))
