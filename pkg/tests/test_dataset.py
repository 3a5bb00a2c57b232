"""Procedural dataset: parameter sampling, captions, voxelization, manifest IO."""

import json

import numpy as np
import pytest

from voxdiff.dataset import (
    CATEGORIES,
    DatasetManifest,
    ManifestEntry,
    ShapeParams,
    build_procedural_dataset,
    build_shape,
    caption_for,
    load_manifest,
    sample_shape_params,
    save_manifest,
    shape_primitive,
)
from voxdiff.geometry import load_vsdf, to_occupancy


def chair_params(back=True):
    return ShapeParams(category="chair", legs=4, leg_height=0.28,
                       leg_halfwidth=0.04, seat_halfextent=0.17,
                       seat_thickness=0.05, back_presence=back,
                       back_height=0.26 if back else 0.0)


class TestShapeParams:
    def test_round_trip(self):
        p = chair_params()
        assert ShapeParams.from_dict(p.to_dict()) == p

    def test_rejects_unknown_category(self):
        with pytest.raises(ValueError, match="category"):
            ShapeParams(category="lamp", legs=4, leg_height=0.3,
                        leg_halfwidth=0.04, seat_halfextent=0.2,
                        seat_thickness=0.05, back_presence=False)

    def test_rejects_bad_leg_count(self):
        with pytest.raises(ValueError, match="legs"):
            ShapeParams(category="stool", legs=5, leg_height=0.2,
                        leg_halfwidth=0.04, seat_halfextent=0.12,
                        seat_thickness=0.05, back_presence=False)

    def test_rejects_hairline_legs(self):
        with pytest.raises(ValueError, match="leg_halfwidth"):
            ShapeParams(category="table", legs=4, leg_height=0.35,
                        leg_halfwidth=0.005, seat_halfextent=0.3,
                        seat_thickness=0.05, back_presence=False)

    def test_back_requires_height(self):
        with pytest.raises(ValueError, match="back_height"):
            ShapeParams(category="chair", legs=4, leg_height=0.28,
                        leg_halfwidth=0.04, seat_halfextent=0.17,
                        seat_thickness=0.05, back_presence=True, back_height=0.0)


class TestSampling:
    def test_deterministic(self):
        a = sample_shape_params("chair", np.random.default_rng(11))
        b = sample_shape_params("chair", np.random.default_rng(11))
        assert a == b

    @pytest.mark.parametrize("category", CATEGORIES)
    def test_category_is_respected(self, category):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = sample_shape_params(category, rng)
            assert p.category == category

    def test_unknown_category_rejected(self):
        with pytest.raises(ValueError, match="category"):
            sample_shape_params("bench", np.random.default_rng(0))

    def test_only_chairs_have_backs(self):
        rng = np.random.default_rng(3)
        backs = []
        for _ in range(60):
            assert not sample_shape_params("table", rng).back_presence
            assert not sample_shape_params("stool", rng).back_presence
            backs.append(sample_shape_params("chair", rng).back_presence)
        assert any(backs) and not all(backs)

    def test_only_stools_vary_leg_count(self):
        rng = np.random.default_rng(4)
        stool_legs = {sample_shape_params("stool", rng).legs for _ in range(40)}
        assert stool_legs == {3, 4}
        for _ in range(10):
            assert sample_shape_params("chair", rng).legs == 4
            assert sample_shape_params("table", rng).legs == 4

    def test_shapes_fit_in_unit_cube(self):
        rng = np.random.default_rng(5)
        for category in CATEGORIES:
            for _ in range(40):
                p = sample_shape_params(category, rng)
                assert p.total_height < 0.9
                assert p.seat_halfextent < 0.45


class TestCaptions:
    def test_mentions_no_back_exactly_when_backless(self):
        rng = np.random.default_rng(6)
        for category in CATEGORIES:
            for _ in range(50):
                p = sample_shape_params(category, rng)
                assert ("no back" in caption_for(p)) == (not p.back_presence)

    def test_always_names_category(self):
        rng = np.random.default_rng(7)
        for category in CATEGORIES:
            for _ in range(20):
                assert category in caption_for(sample_shape_params(category, rng))

    def test_examples(self):
        p = chair_params(back=True)
        assert caption_for(p) == "a tall chair with four thin legs and a high back"
        q = ShapeParams(category="stool", legs=3, leg_height=0.16,
                        leg_halfwidth=0.05, seat_halfextent=0.12,
                        seat_thickness=0.05, back_presence=False)
        assert caption_for(q) == "a short stool with three thick legs and no back"


class TestGeometry:
    def test_seat_interior_is_inside(self):
        p = chair_params()
        prim = shape_primitive(p)
        # point in the middle of the seat slab
        seat_mid_z = -p.total_height / 2 + p.leg_height + p.seat_thickness / 2
        val = prim.evaluate(np.array([[0.0, 0.0, seat_mid_z]]))
        assert val[0] < 0

    def test_far_corner_is_outside(self):
        prim = shape_primitive(chair_params())
        val = prim.evaluate(np.array([[0.49, 0.49, 0.49]]))
        assert val[0] > 0

    def test_back_adds_occupancy(self):
        with_back = build_shape(chair_params(back=True), 32)
        without = build_shape(chair_params(back=False), 32)
        occ_with = to_occupancy(with_back, 32).bits.sum()
        occ_without = to_occupancy(without, 32).bits.sum()
        assert occ_with > occ_without

    @pytest.mark.parametrize("category", CATEGORIES)
    def test_voxelized_shapes_nonempty_and_bounded(self, category):
        rng = np.random.default_rng(8)
        for _ in range(5):
            p = sample_shape_params(category, rng)
            g = build_shape(p, 32)
            occ = to_occupancy(g, 32).bits
            assert occ.sum() > 50  # visible solid
            # nothing touches the domain boundary
            assert occ[0].sum() == 0 and occ[-1].sum() == 0
            assert occ[:, 0].sum() == 0 and occ[:, -1].sum() == 0
            assert occ[:, :, 0].sum() == 0 and occ[:, :, -1].sum() == 0


class TestBuildDataset:
    def test_byte_identical_given_seed(self, tmp_path):
        m1 = build_procedural_dataset(6, ["chair", "table"], 16, 99, tmp_path / "a")
        m2 = build_procedural_dataset(6, ["chair", "table"], 16, 99, tmp_path / "b")
        assert len(m1) == len(m2) == 6
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        build_procedural_dataset(2, ["chair"], 16, 1, tmp_path / "a")
        build_procedural_dataset(2, ["chair"], 16, 2, tmp_path / "b")
        assert (tmp_path / "a" / "shape_0000.vsdf").read_bytes() != \
            (tmp_path / "b" / "shape_0000.vsdf").read_bytes()

    def test_categories_rotate(self, tmp_path):
        m = build_procedural_dataset(5, ["chair", "table"], 16, 0, tmp_path)
        assert m.categories() == ["chair", "table", "chair", "table", "chair"]

    def test_two_hundred_shapes(self, tmp_path):
        m = build_procedural_dataset(200, list(CATEGORIES), 16, 0, tmp_path)
        assert len(m) == 200
        files = sorted(p.name for p in tmp_path.glob("shape_*.vsdf"))
        assert len(files) == 200
        assert files[0] == "shape_0000.vsdf" and files[-1] == "shape_0199.vsdf"
        reloaded = load_manifest(tmp_path / "manifest.jsonl")
        assert len(reloaded) == 200
        assert reloaded.captions() == m.captions()

    def test_splits_cover_every_category(self, tmp_path):
        m = build_procedural_dataset(60, list(CATEGORIES), 16, 0, tmp_path)
        assert len(m.subset("train")) == 48
        assert len(m.subset("val")) == 6
        assert len(m.subset("test")) == 6
        for split in ("train", "val", "test"):
            assert set(m.subset(split).categories()) == set(CATEGORIES)
        indices = [e.index for s in ("train", "val", "test")
                   for e in m.subset(s).entries]
        assert sorted(indices) == list(range(60))

    def test_subset_rejects_unknown_split(self, tmp_path):
        m = build_procedural_dataset(2, ["chair"], 16, 0, tmp_path)
        with pytest.raises(ValueError, match="split"):
            m.subset("holdout")

    def test_rejects_bad_inputs(self, tmp_path):
        with pytest.raises(ValueError, match="n_shapes"):
            build_procedural_dataset(0, ["chair"], 16, 0, tmp_path)
        with pytest.raises(ValueError, match="categories"):
            build_procedural_dataset(2, ["chair", "sofa"], 16, 0, tmp_path)
        with pytest.raises(ValueError, match="categories"):
            build_procedural_dataset(2, [], 16, 0, tmp_path)

    def test_grids_load_back(self, tmp_path):
        m = build_procedural_dataset(3, ["stool"], 16, 5, tmp_path)
        g = m.load_grid(m.entries[1])
        assert g.values.shape == (16, 16, 16)
        stack = m.load_all()
        assert stack.shape == (3, 16, 16, 16)
        np.testing.assert_array_equal(stack[1], g.values)


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        m = build_procedural_dataset(4, ["chair", "stool"], 16, 12, tmp_path)
        r = load_manifest(tmp_path / "manifest.jsonl")
        assert r.resolution == 16 and r.seed == 12
        assert r.entries == m.entries

    def test_empty_manifest_is_valid(self, tmp_path):
        empty = DatasetManifest(resolution=16, seed=0, entries=[], root=tmp_path)
        save_manifest(empty, tmp_path / "manifest.jsonl")
        r = load_manifest(tmp_path / "manifest.jsonl")
        assert len(r) == 0

    def test_malformed_line_reports_line_number(self, tmp_path):
        build_procedural_dataset(2, ["chair"], 16, 0, tmp_path)
        path = tmp_path / "manifest.jsonl"
        lines = path.read_text().splitlines()
        lines[2] = lines[2][:-5]  # truncate the second entry's JSON
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match=":3:"):
            load_manifest(path)

    def test_missing_shape_file_names_it(self, tmp_path):
        build_procedural_dataset(2, ["chair"], 16, 0, tmp_path)
        (tmp_path / "shape_0001.vsdf").unlink()
        with pytest.raises(FileNotFoundError, match="shape_0001.vsdf"):
            load_manifest(tmp_path / "manifest.jsonl")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.jsonl")

    def test_wrong_format_header(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"format": "other", "version": 1}) + "\n")
        with pytest.raises(ValueError, match="format"):
            load_manifest(path)

    def test_count_mismatch(self, tmp_path):
        build_procedural_dataset(2, ["chair"], 16, 0, tmp_path)
        path = tmp_path / "manifest.jsonl"
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["count"] = 5
        lines[0] = json.dumps(header)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="declares 5"):
            load_manifest(path)

    def test_bad_entry_reports_line(self, tmp_path):
        build_procedural_dataset(1, ["chair"], 16, 0, tmp_path)
        path = tmp_path / "manifest.jsonl"
        lines = path.read_text().splitlines()
        entry = json.loads(lines[1])
        del entry["captions"]
        lines[1] = json.dumps(entry)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match=":2:"):
            load_manifest(path)

    def test_entry_round_trip(self):
        e = ManifestEntry(index=3, file="shape_0003.vsdf", category="chair",
                          captions=("a chair", "a seat with a back"),
                          split="val", params=chair_params())
        assert ManifestEntry.from_dict(e.to_dict()) == e

    def test_entry_needs_caption_and_valid_split(self):
        with pytest.raises(ValueError, match="caption"):
            ManifestEntry(index=0, file="x.vsdf", category="chair",
                          captions=(), split="train", params=chair_params())
        with pytest.raises(ValueError, match="split"):
            ManifestEntry(index=0, file="x.vsdf", category="chair",
                          captions=("a chair",), split="holdout",
                          params=chair_params())
