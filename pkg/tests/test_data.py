"""Format readers, preprocessing, samplers, and toy-data generation."""

import struct

import cv2
import numpy as np
import pytest
import torch
from scipy import stats

from stereoadapt.data import (
    DEFAULT_SHIFT,
    IDENTITY_SHIFT,
    DatasetManifest,
    PairedSampler,
    PhotometricShift,
    PreprocessRules,
    StereoDataset,
    StereoSample,
    UnpairedSampler,
    generate_toy_dataset,
    load_manifest,
    preprocess,
    read_kitti_disparity,
    read_pfm_disparity,
    save_manifest,
    write_kitti_disparity,
    write_pfm_disparity,
)
from stereoadapt.errors import ContractViolationError, DataFormatError
from stereoadapt.geometry import DisparityMap, FeatureMap, inverse_warp


def reference_pfm_reader(path):
    """Independent struct-based PFM decoder (cross-check oracle)."""
    with open(path, "rb") as f:
        assert f.readline().strip() == b"Pf"
        w, h = map(int, f.readline().split())
        scale = float(f.readline().strip())
        fmt = "<f" if scale < 0 else ">f"
        rows = []
        for _ in range(h):
            rows.append([struct.unpack(fmt, f.read(4))[0] for _ in range(w)])
    return np.array(rows[::-1], dtype=np.float32)


class TestPfm:
    def test_single_cell_little_endian(self, tmp_path):
        path = tmp_path / "one.pfm"
        write_pfm_disparity(np.array([[2.5]], dtype=np.float32), path)
        d = read_pfm_disparity(path)
        assert d.data.shape == (1, 1)
        assert d.data.item() == 2.5
        assert d.valid.all()
        assert reference_pfm_reader(path)[0, 0] == 2.5

    def test_round_trip_matches_reference(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.uniform(0, 200, size=(6, 9)).astype(np.float32)
        path = tmp_path / "map.pfm"
        write_pfm_disparity(values, path)
        got = read_pfm_disparity(path)
        assert np.array_equal(got.data.numpy(), values)
        assert np.array_equal(reference_pfm_reader(path), values)

    def test_rejects_color_header(self, tmp_path):
        path = tmp_path / "color.pfm"
        path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
        with pytest.raises(DataFormatError, match="color"):
            read_pfm_disparity(path)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pfm"
        path.write_bytes(b"XX\n1 1\n-1.0\n" + b"\x00" * 4)
        with pytest.raises(DataFormatError, match="magic"):
            read_pfm_disparity(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.pfm"
        path.write_bytes(b"Pf\n2 2\n-1.0\n" + b"\x00" * 7)
        with pytest.raises(DataFormatError, match="offset"):
            read_pfm_disparity(path)

    def test_negative_and_inf_marked_invalid(self, tmp_path):
        path = tmp_path / "inv.pfm"
        write_pfm_disparity(np.array([[1.0, -2.0], [np.inf, 4.0]], dtype=np.float32), path)
        d = read_pfm_disparity(path)
        assert d.valid.tolist() == [[True, False], [False, True]]

    def test_big_endian_payload(self, tmp_path):
        path = tmp_path / "be.pfm"
        values = np.array([[3.25, 0.5]], dtype=np.float32)
        with open(path, "wb") as f:
            f.write(b"Pf\n2 1\n1.0\n")
            f.write(np.flipud(values).astype(">f4").tobytes())
        assert np.array_equal(read_pfm_disparity(path).data.numpy(), values)


class TestKitti:
    def test_decoding_convention(self, tmp_path):
        stored = np.array([[256, 0], [51200, 384]], dtype=np.uint16)
        path = tmp_path / "d.png"
        cv2.imwrite(str(path), stored)
        d = read_kitti_disparity(path)
        assert d.data[0, 0].item() == 1.0
        assert not d.valid[0, 1]
        assert d.data[1, 0].item() == 200.0
        assert d.data[1, 1].item() == 1.5

    def test_wrong_bit_depth(self, tmp_path):
        path = tmp_path / "d8.png"
        cv2.imwrite(str(path), np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(DataFormatError, match="16-bit"):
            read_kitti_disparity(path)

    def test_write_read_round_trip(self, tmp_path):
        data = torch.tensor([[1.0, 2.5], [0.25, 100.0]])
        valid = torch.tensor([[True, True], [False, True]])
        path = tmp_path / "rt.png"
        write_kitti_disparity(DisparityMap(data, valid=valid), path)
        got = read_kitti_disparity(path)
        assert torch.equal(got.valid, valid)
        assert torch.allclose(got.data[valid], data[valid])


def make_sample(h=8, w=12, disp_value=10.0):
    left = torch.linspace(-1, 1, 3 * h * w).reshape(3, h, w)
    right = left.flip(-1)
    disparity = DisparityMap(torch.full((h, w), disp_value))
    noc = torch.ones(h, w, dtype=torch.bool)
    return StereoSample(left, right, disparity, noc, "sample")


class TestPreprocess:
    def test_identity_rules(self):
        s = make_sample()
        out = preprocess(s, PreprocessRules())
        assert torch.equal(out.left, s.left)
        assert torch.equal(out.disparity.data, s.disparity.data)

    def test_half_resize_halves_disparity(self):
        out = preprocess(make_sample(disp_value=10.0), PreprocessRules(half_resize=True))
        assert out.left.shape == (3, 4, 6)
        assert torch.allclose(out.disparity.data, torch.full((4, 6), 5.0))
        assert out.disparity.scale == 1

    def test_crop_window_consistency(self):
        s = make_sample()
        # marker pixel at a known location in every field
        s.left[:, 5, 7] = 9.0
        s.right[:, 5, 7] = 9.0
        s.disparity.data[5, 7] = 99.0
        s.noc_mask[5, 7] = False
        rng = np.random.default_rng(0)
        for _ in range(5):
            out = preprocess(s, PreprocessRules(crop=(4, 6)), rng)
            marker = out.left[0] == 9.0
            assert torch.equal(out.right[0] == 9.0, marker)
            assert torch.equal(out.disparity.data == 99.0, marker)
            assert torch.equal(~out.noc_mask, marker)

    def test_crop_larger_than_image(self):
        with pytest.raises(ContractViolationError):
            preprocess(make_sample(), PreprocessRules(crop=(100, 100)), np.random.default_rng(0))


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    src, tgt = generate_toy_dataset(11, 8, (32, 64), 6, "default", out)
    return src, tgt


class TestSamplers:
    def test_unpaired_pool_size(self, toy):
        src, _ = toy
        sampler = UnpairedSampler(StereoDataset(src), np.random.default_rng(0))
        assert sampler.pool_size == 16

    def test_paired_draw_same_scene(self, toy):
        src, _ = toy
        sampler = PairedSampler(StereoDataset(src), np.random.default_rng(1))
        s = sampler.draw()
        assert s.source_id.startswith("scene_")
        assert s.left.shape == s.right.shape
        assert s.disparity is not None

    def test_seeded_determinism(self, toy):
        src, _ = toy
        ds = StereoDataset(src)
        a = [UnpairedSampler(ds, np.random.default_rng(5)).draw()[1:] for _ in range(1)]
        seq1 = UnpairedSampler(ds, np.random.default_rng(5))
        seq2 = UnpairedSampler(ds, np.random.default_rng(5))
        for _ in range(10):
            d1 = seq1.draw()
            d2 = seq2.draw()
            assert d1[1] == d2[1] and d1[2] == d2[2]
            assert torch.equal(d1[0], d2[0])

    def test_unpaired_uniformity_chi_square(self, toy):
        src, _ = toy
        ds = StereoDataset(src)
        sampler = UnpairedSampler(ds, np.random.default_rng(123))
        counts = np.zeros(sampler.pool_size)
        for _ in range(10000):
            k = int(sampler.rng.integers(0, sampler.pool_size))
            counts[k] += 1
        p = stats.chisquare(counts).pvalue
        assert p > 0.001

    def test_empty_dataset_rejected(self, tmp_path):
        manifest = DatasetManifest("synthetic", [])
        with pytest.raises(ContractViolationError):
            PairedSampler(StereoDataset(manifest), np.random.default_rng(0))


class TestToyData:
    def test_manifest_counts(self, toy):
        src, tgt = toy
        assert src.count == 8 and tgt.count == 8

    def test_reprojection_identity(self, toy):
        src, _ = toy
        ds = StereoDataset(src)
        for i in range(len(ds)):
            s = ds.load(i)
            warped = inverse_warp(FeatureMap(s.right), s.disparity)
            diff = (warped.data - s.left).abs()[:, s.noc_mask]
            assert bool((diff == 0).all())

    def test_real_domain_strips_gt(self, toy):
        _, tgt = toy
        s = StereoDataset(tgt).load(0)
        assert s.disparity is None and s.noc_mask is None
        assert StereoDataset(tgt, with_gt_override=True).load(0).disparity is not None

    def test_identity_profile_pixel_identical(self, tmp_path):
        src, tgt = generate_toy_dataset(3, 2, (32, 64), 5, "identity", tmp_path)
        a = StereoDataset(src).load(0)
        b = StereoDataset(tgt, with_gt_override=True).load(0)
        assert torch.equal(a.left, b.left) and torch.equal(a.right, b.right)

    def test_default_profile_changes_pixels(self, toy):
        src, tgt = toy
        a = StereoDataset(src).load(0)
        b = StereoDataset(tgt).load(0)
        assert (a.left - b.left).abs().mean() > 0

    def test_deterministic_from_seed(self, tmp_path):
        a1, _ = generate_toy_dataset(9, 2, (32, 64), 5, "default", tmp_path / "a")
        a2, _ = generate_toy_dataset(9, 2, (32, 64), 5, "default", tmp_path / "b")
        for e1, e2 in zip(a1.entries, a2.entries):
            b1 = (a1.root / e1["left"]).read_bytes()
            b2 = (a2.root / e2["left"]).read_bytes()
            assert b1 == b2

    def test_invalid_geometry_rejected(self, tmp_path):
        with pytest.raises(ContractViolationError):
            generate_toy_dataset(0, 2, (32, 64), 20, "identity", tmp_path)  # >= width/4
        with pytest.raises(ContractViolationError):
            generate_toy_dataset(0, 0, (32, 64), 5, "identity", tmp_path)


class TestManifests:
    def test_round_trip(self, toy, tmp_path):
        src, _ = toy
        path = tmp_path / "m.json"
        save_manifest(src, path)
        # entries reference files relative to the original root
        doc = path.read_text()
        assert "source/left_0000.png" in doc

    def test_missing_file_rejected(self, tmp_path):
        manifest = DatasetManifest("real", [{"id": "x", "left": "nope.png", "right": "nope.png"}])
        path = tmp_path / "m.json"
        save_manifest(manifest, path)
        with pytest.raises(DataFormatError, match="missing file"):
            load_manifest(path)

    def test_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text('{"version": 1, "domain": "real", "count": 3, "entries": []}')
        with pytest.raises(DataFormatError, match="count"):
            load_manifest(path)
