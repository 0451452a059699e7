import math

import numpy as np
import pytest

from progseg.data import (Building, Dataset, SceneSpec, build_pyramid, decode_pnm, encode_pnm,
                          generate_scene, load_manifest, rasterize, read_manifest, read_pgm,
                          read_ppm, reduce_mask, split, synthetic_dataset, to_bytes,
                          write_dataset, write_manifest, write_pgm, write_ppm)
from progseg.errors import DataError, FormatError


def point_in_polygon(x, y, poly):
    """Even-odd ray casting."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


class TestScenes:
    def test_zero_buildings_gives_empty_mask(self):
        img, mask = generate_scene(SceneSpec(buildings=(0, 0), seed=4))
        assert mask.sum() == 0 and img.shape == (3, 64, 64)

    @pytest.mark.parametrize("x0,y0,w,h", [(0, 0, 5, 7), (10, 3, 12, 6), (50, 60, 14, 4)])
    def test_axis_aligned_count(self, x0, y0, w, h):
        m = rasterize(Building(x0 + w / 2, y0 + h / 2, w, h, 0.0), 64)
        assert m.sum() == w * h
        assert m[y0:y0 + h, x0:x0 + w].all()

    def test_rotated_matches_point_in_polygon(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            b = Building(float(rng.uniform(15, 49)), float(rng.uniform(15, 49)),
                         float(rng.integers(4, 18)), float(rng.integers(4, 18)),
                         float(rng.uniform(0, math.pi)))
            poly = b.corners()
            oracle = np.array([[point_in_polygon(x + 0.5, y + 0.5, poly) for x in range(64)]
                               for y in range(64)])
            got = rasterize(b, 64)
            assert got.sum() == oracle.sum()
            np.testing.assert_array_equal(got, oracle)

    def test_output_contract_and_determinism(self):
        spec = SceneSpec(seed=11)
        img, mask = generate_scene(spec)
        assert img.dtype == np.float32 and mask.dtype == np.uint8
        assert img.min() >= 0 and img.max() <= 1
        assert set(np.unique(mask)) <= {0, 1}
        img2, mask2 = generate_scene(spec)
        assert img.tobytes() == img2.tobytes() and mask.tobytes() == mask2.tobytes()
        img3, _ = generate_scene(SceneSpec(seed=12))
        assert img.tobytes() != img3.tobytes()

    def test_impossible_placement_names_the_problem(self):
        spec = SceneSpec(size=16, buildings=(9, 9), building_size=(8, 8), seed=2)
        with pytest.raises(DataError, match=r"building \d+ of 9.*16px.*seed 2"):
            generate_scene(spec)

    def test_building_larger_than_canvas(self):
        with pytest.raises(DataError):
            generate_scene(SceneSpec(size=16, building_size=(4, 20)))

    def test_distractors_are_not_in_mask(self):
        # with no buildings the mask stays empty however many cars and roads appear
        img, mask = generate_scene(SceneSpec(buildings=(0, 0), cars=(8, 8), roads=(2, 2)))
        assert mask.sum() == 0


class TestPyramid:
    def test_constant_image_and_full_mask(self):
        img = np.full((3, 16, 16), 0.3, dtype=np.float32)
        mask = np.ones((16, 16), dtype=np.uint8)
        pyr = build_pyramid(img, mask, 4)
        assert sorted(pyr) == [4, 8, 16]
        for r, (im, m) in pyr.items():
            assert im.shape == (3, r, r) and m.shape == (r, r)
            np.testing.assert_allclose(im, 0.3, rtol=1e-6)
            assert (m == 1).all()

    def test_mean_is_preserved(self):
        img = np.random.default_rng(0).uniform(size=(3, 32, 32)).astype(np.float32)
        pyr = build_pyramid(img, np.zeros((32, 32), np.uint8), 4)
        for r, (im, _) in pyr.items():
            np.testing.assert_allclose(im.astype(np.float64).mean(axis=(1, 2)),
                                       img.astype(np.float64).mean(axis=(1, 2)), atol=1e-6)

    def test_checkerboard_tie_goes_positive(self):
        m = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.uint8)
        out = reduce_mask(m)
        direct = np.array([[int(m[2 * i:2 * i + 2, 2 * j:2 * j + 2].sum() >= 2)
                            for j in range(4)] for i in range(4)])
        np.testing.assert_array_equal(out, direct)
        assert (out == 1).all()

    def test_majority_vote_oracle(self):
        m = np.random.default_rng(1).integers(0, 2, size=(16, 16)).astype(np.uint8)
        direct = np.array([[int(m[2 * i:2 * i + 2, 2 * j:2 * j + 2].sum() >= 2)
                            for j in range(8)] for i in range(8)])
        np.testing.assert_array_equal(reduce_mask(m), direct)

    @pytest.mark.parametrize("full,min_res", [(48, 8), (64, 0), (64, 24)])
    def test_bad_ratio(self, full, min_res):
        with pytest.raises(DataError):
            build_pyramid(np.zeros((3, full, full)), np.zeros((full, full)), min_res)


class TestSplit:
    def test_seventy_thirty(self):
        tr, te = split(10, 0.7, 0)
        assert len(tr) == 7 and len(te) == 3

    def test_disjoint_exhaustive_deterministic(self):
        tr, te = split(101, 0.7, 5)
        assert set(tr) | set(te) == set(range(101)) and not set(tr) & set(te)
        tr2, te2 = split(101, 0.7, 5)
        np.testing.assert_array_equal(tr, tr2)
        np.testing.assert_array_equal(te, te2)
        assert not np.array_equal(tr, split(101, 0.7, 6)[0])

    def test_bad_fraction(self):
        with pytest.raises(DataError):
            split(10, 1.5)


class TestDataset:
    def test_shapes_and_levels(self):
        ds = synthetic_dataset(3, SceneSpec(size=32, buildings=(1, 2), building_size=(4, 8)), 0)
        assert len(ds) == 3 and ds.resolution == 32 and sorted(ds.levels) == [8, 16, 32]
        sub = ds.subset([2, 0])
        np.testing.assert_array_equal(sub.masks_at(8), ds.masks_at(8)[[2, 0]])
        with pytest.raises(DataError):
            ds.masks_at(4)

    def test_mismatched_arrays(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 3, 8, 8), np.float32), np.zeros((3, 8, 8), np.uint8))


class TestNetpbm:
    def test_hand_built_p5(self):
        # 2×2 grey image: the minimal legal header is "P5 2 2 255" plus four
        # separators, so the file is 11 + 4 = 15 bytes
        data = b"P5\n2 2\n255\n" + bytes([0, 64, 128, 255])
        assert len(data) == 15
        magic, arr = decode_pnm(data)
        assert magic == "P5"
        np.testing.assert_array_equal(arr, [[0, 64], [128, 255]])

    def test_p5_scaling(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5 2 1 255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(read_pgm(p), [[0.0, 1.0]])

    def test_header_comments(self):
        magic, arr = decode_pnm(b"P5\n# made by hand\n1 1\n255\n\x07")
        assert arr.tolist() == [[7]]

    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 256, size=(3, 5, 7)).astype(np.uint8)
        write_ppm(tmp_path / "x.ppm", rgb)
        raw = (tmp_path / "x.ppm").read_bytes()
        back = to_bytes(read_ppm(tmp_path / "x.ppm"))
        np.testing.assert_array_equal(back, rgb)
        write_ppm(tmp_path / "y.ppm", back)
        assert (tmp_path / "y.ppm").read_bytes() == raw
        grey = rng.integers(0, 256, size=(4, 6)).astype(np.uint8)
        write_pgm(tmp_path / "g.pgm", grey)
        np.testing.assert_array_equal(to_bytes(read_pgm(tmp_path / "g.pgm")), grey)

    def test_round_half_up(self):
        np.testing.assert_array_equal(to_bytes(np.array([0.5 / 255, 1.5 / 255, -1, 2])),
                                      [1, 2, 0, 255])

    @pytest.mark.parametrize("data,offset", [
        (b"P3\n1 1\n255\n\x00", 0),
        (b"P5\n1 1\n65535\n\x00\x00", 7),
        (b"P5\n2 2\n255\n\x00\x00", 13),
        (b"P5\n1 1\n255\n\x00\x01", 12),
        (b"P5\nx 1\n255\n\x00", 3),
        (b"P5\n0 1\n255\n", 3),
        (b"P5", 2),
    ])
    def test_format_errors_name_offset(self, data, offset):
        with pytest.raises(FormatError) as e:
            decode_pnm(data)
        assert e.value.offset == offset
        assert str(offset) in str(e.value)

    def test_wrong_kind(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(encode_pnm(np.zeros((2, 2), np.uint8)))
        with pytest.raises(FormatError):
            read_ppm(p)


class TestManifest:
    def test_write_and_load_dataset(self, tmp_path):
        ds = synthetic_dataset(3, SceneSpec(size=16, buildings=(1, 2), building_size=(3, 6)), 2,
                               min_res=4)
        manifest = write_dataset(tmp_path, ds)
        lines = manifest.read_bytes().decode("utf-8").split("\n")
        assert lines[0] == "images/00000.ppm\tmasks/00000.pgm" and lines[-1] == ""
        back = load_manifest(manifest, min_res=4)
        np.testing.assert_array_equal(back.masks, ds.masks)
        np.testing.assert_array_equal(to_bytes(back.images), to_bytes(ds.images))

    def test_malformed_lines(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.ppm b.pgm\n")
        with pytest.raises(DataError, match=":1:"):
            read_manifest(p)
        p.write_text("")
        with pytest.raises(DataError):
            read_manifest(p)

    def test_paths_resolve_relative_to_manifest(self, tmp_path):
        write_manifest(tmp_path / "m.tsv", [("i/a.ppm", "m/a.pgm")])
        assert read_manifest(tmp_path / "m.tsv") == [(tmp_path / "i/a.ppm",
                                                      tmp_path / "m/a.pgm")]
