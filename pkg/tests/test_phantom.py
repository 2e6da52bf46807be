"""Phantom generation, the designed intensity ambiguity, and the RFSV
volume / dataset formats."""

import numpy as np
import pytest

from resfuse import phantom
from resfuse.phantom import (
    LABEL_BACKGROUND,
    LABEL_CYST,
    LABEL_GLAND,
    LABEL_LESION,
    PhantomSpec,
    PlacementError,
    VolumeFormatError,
    generate,
    load_case,
    read_manifest,
    subtraction,
    volume_read,
    volume_write,
    write_dataset,
)


class TestGenerate:
    def test_deterministic_in_spec_and_seed(self):
        spec = PhantomSpec()
        a, b = generate(spec, 42), generate(spec, 42)
        assert np.array_equal(a.pre, b.pre)
        assert np.array_equal(a.post, b.post)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        spec = PhantomSpec()
        a, b = generate(spec, 1), generate(spec, 2)
        assert not np.array_equal(a.labels, b.labels)

    def test_shapes_dtypes_and_label_values(self):
        s = generate(PhantomSpec(size=(16, 16, 16), radius_range=(2.0, 4.0)), 0)
        assert s.pre.shape == s.post.shape == s.labels.shape == (16, 16, 16)
        assert s.pre.dtype == np.float32 and s.labels.dtype == np.uint8
        assert set(np.unique(s.labels)) <= {LABEL_BACKGROUND, LABEL_LESION,
                                            LABEL_CYST, LABEL_GLAND}

    def test_all_tissue_kinds_present(self):
        s = generate(PhantomSpec(), 5)
        for value in (LABEL_LESION, LABEL_CYST, LABEL_GLAND):
            assert (s.labels == value).any()

    def test_intensities_in_clip_range(self):
        s = generate(PhantomSpec(), 3)
        for vol in (s.pre, s.post):
            assert vol.min() >= 0.0 and vol.max() <= 2.0

    def test_designed_ambiguity(self):
        """Lesion and gland coincide post-contrast but separate
        pre-contrast — the property the whole experiment rests on."""
        spec = PhantomSpec()
        post_gap, pre_gap, enh = [], [], []
        for seed in range(25):
            s = generate(spec, 1000 + seed)
            lesion = s.labels == LABEL_LESION
            gland = s.labels == LABEL_GLAND
            post_gap.append(abs(s.post[lesion].mean() - s.post[gland].mean()))
            pre_gap.append(abs(s.pre[lesion].mean() - s.pre[gland].mean()))
            enh.append((s.post[lesion] - s.pre[lesion]).mean())
        assert np.mean(post_gap) < 0.05     # indistinguishable post-contrast
        assert np.mean(pre_gap) > 0.10      # separable pre-contrast
        assert np.mean(enh) >= 0.20         # lesions genuinely enhance

    def test_noiseless_mode(self):
        a = generate(PhantomSpec(noise_sigma=0.0), 7)
        b = generate(PhantomSpec(noise_sigma=0.0), 7)
        assert np.array_equal(a.pre, b.pre)
        # noiseless background is exactly the blurred band value
        assert a.pre[0, 0, 0] == pytest.approx(0.20, abs=1e-6)

    def test_placement_failure_raises(self):
        spec = PhantomSpec(size=(8, 8, 8), lesion_count=(40, 40),
                           radius_range=(3.0, 4.0), max_place_attempts=5)
        with pytest.raises(PlacementError):
            generate(spec, 0)

    def test_spec_dict_roundtrip(self):
        spec = PhantomSpec(size=(16, 16, 16), noise_sigma=0.0)
        assert PhantomSpec.from_dict(spec.to_dict()) == spec

    def test_subtraction(self):
        s = generate(PhantomSpec(), 9)
        sub = subtraction(s.pre, s.post)
        assert np.allclose(sub, s.post - s.pre)
        with pytest.raises(ValueError):
            subtraction(s.pre, s.post[:16])


class TestVolumeFormat:
    def test_roundtrip_many_random_arrays(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(100):
            rank = int(rng.integers(1, 5))
            dims = tuple(int(rng.integers(1, 6)) for _ in range(rank))
            if rng.integers(0, 2):
                arr = rng.standard_normal(dims).astype(np.float32)
            else:
                arr = rng.integers(0, 256, size=dims).astype(np.uint8)
            path = tmp_path / f"v{i}.rfsv"
            volume_write(path, arr)
            back = volume_read(path)
            assert back.dtype == arr.dtype and back.shape == arr.shape
            assert np.array_equal(back, arr)

    def test_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(VolumeFormatError, match="dtype"):
            volume_write(tmp_path / "v.rfsv", np.zeros(3, dtype=np.float64))

    def test_detects_corruption(self, tmp_path):
        path = tmp_path / "v.rfsv"
        volume_write(path, np.arange(27, dtype=np.float32).reshape(3, 3, 3))
        raw = bytearray(path.read_bytes())
        raw[-8] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError, match="CRC"):
            volume_read(path)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "v.rfsv"
        path.write_bytes(b"XXXX" + bytes(32))
        with pytest.raises(VolumeFormatError, match="magic"):
            volume_read(path)

    def test_rejects_truncation(self, tmp_path):
        path = tmp_path / "v.rfsv"
        volume_write(path, np.zeros((4, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:12])
        with pytest.raises(VolumeFormatError):
            volume_read(path)

    def test_rejects_length_mismatch(self, tmp_path):
        path = tmp_path / "v.rfsv"
        volume_write(path, np.zeros((4, 4), dtype=np.float32))
        raw = path.read_bytes()
        import struct
        import zlib

        body = raw[:-4] + b"\x00\x00\x00\x00"
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(VolumeFormatError, match="length"):
            volume_read(path)


class TestDataset:
    def test_write_and_load(self, tmp_path):
        d = tmp_path / "ds"
        manifest = write_dataset(d, cases=8, seed=100,
                                 spec=PhantomSpec(size=(16, 16, 16), radius_range=(2.0, 4.0)))
        assert manifest["cases"] == list(range(8))
        assert len(manifest["train"]) == 6 and len(manifest["val"]) == 2
        assert not set(manifest["train"]) & set(manifest["val"])
        back = read_manifest(d)
        assert back["train"] == manifest["train"]
        s = load_case(d, 0)
        ref = generate(PhantomSpec(size=(16, 16, 16), radius_range=(2.0, 4.0)), 100)
        assert np.array_equal(s.pre, ref.pre)
        assert np.array_equal(s.labels, ref.labels)

    def test_zero_cases(self, tmp_path):
        manifest = write_dataset(tmp_path / "empty", cases=0, seed=0)
        assert manifest["cases"] == [] and manifest["train"] == []

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path)

    def test_manifest_missing_key(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"cases": []}')
        with pytest.raises(VolumeFormatError, match="train"):
            read_manifest(tmp_path)

    def test_manifest_records_spec(self, tmp_path):
        spec = PhantomSpec(size=(16, 16, 16), noise_sigma=0.0)
        manifest = write_dataset(tmp_path / "ds", cases=1, seed=0, spec=spec)
        assert PhantomSpec.from_dict(manifest["spec"]) == spec
