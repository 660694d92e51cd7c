"""On-disk format round-trips and failure modes."""

import numpy as np
import pytest

from crowdscale import formats
from crowdscale.errors import DataError, FormatError


class TestTnsr:
    def test_round_trip(self, tmp_path, rng):
        arr = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
        path = tmp_path / "x.tnsr"
        formats.write_tnsr(path, arr)
        np.testing.assert_array_equal(formats.read_tnsr(path), arr)

    def test_2d_promoted(self, tmp_path, rng):
        arr = rng.random((4, 6)).astype(np.float32)
        path = tmp_path / "x.tnsr"
        formats.write_tnsr(path, arr)
        out = formats.read_tnsr(path)
        assert out.shape == (1, 1, 4, 6)
        np.testing.assert_array_equal(out[0, 0], arr)

    def test_write_is_byte_deterministic(self, tmp_path, rng):
        arr = rng.standard_normal((1, 2, 3, 4)).astype(np.float32)
        p1, p2 = tmp_path / "a.tnsr", tmp_path / "b.tnsr"
        formats.write_tnsr(p1, arr)
        formats.write_tnsr(p2, arr)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.tnsr"
        path.write_bytes(b"NOPE 1 1 1 1 1\n")
        with pytest.raises(FormatError):
            formats.read_tnsr(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.tnsr"
        path.write_bytes(b"TNSR 1 1 1 2 2\n" + b"\x00" * 7)
        with pytest.raises(FormatError):
            formats.read_tnsr(path)


class TestCanw:
    def test_round_trip_preserves_order(self, tmp_path, rng):
        records = {"layer0.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
                   "layer0.bias": rng.standard_normal((1, 4, 1, 1)).astype(np.float32)}
        path = tmp_path / "w.canw"
        formats.write_canw(path, records)
        out = formats.read_canw(path)
        assert list(out) == list(records)
        for name in records:
            np.testing.assert_array_equal(out[name], records[name])

    def test_save_load_save_byte_identical(self, tmp_path, rng):
        records = {"a": rng.standard_normal((2, 2, 1, 1)).astype(np.float32)}
        p1, p2 = tmp_path / "1.canw", tmp_path / "2.canw"
        formats.write_canw(p1, records)
        formats.write_canw(p2, formats.read_canw(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_whitespace_name_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            formats.write_canw(tmp_path / "w.canw",
                               {"bad name": np.zeros((1, 1, 1, 1))})

    def test_truncated_record(self, tmp_path):
        path = tmp_path / "w.canw"
        path.write_bytes(b"CANW 1 1\nweight 1 1 2 2\n\x00\x00")
        with pytest.raises(FormatError):
            formats.read_canw(path)


class TestPnm:
    def test_ppm_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        formats.write_ppm(path, img)
        out = formats.read_pnm(path)
        np.testing.assert_allclose(out * 255.0, img.astype(np.float32), atol=1e-4)

    def test_pgm_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
        path = tmp_path / "x.pgm"
        formats.write_pgm(path, img)
        out = formats.read_pnm(path)
        assert out.shape == (4, 6)
        np.testing.assert_allclose(out * 255.0, img.astype(np.float32), atol=1e-4)

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x10\x20\x30")
        out = formats.read_pnm(path)
        assert out.shape == (2, 2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(FormatError):
            formats.read_pnm(path)

    def test_wrong_maxval(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError):
            formats.read_pnm(path)


class TestHomography:
    def test_round_trip_exact(self, tmp_path, rng):
        m = rng.standard_normal((3, 3))
        m[2, 2] = 1.0
        path = tmp_path / "h.txt"
        formats.write_homography(path, m)
        np.testing.assert_array_equal(formats.read_homography(path), m)

    def test_wrong_count(self, tmp_path):
        path = tmp_path / "h.txt"
        path.write_text("1 2 3 4\n")
        with pytest.raises(FormatError):
            formats.read_homography(path)


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        pts = [(3.5, 4.25), (0.0, 0.0), (63.0, 10.0)]
        path = tmp_path / "a.json"
        formats.write_annotations(path, pts, (64, 64))
        out_pts, dims = formats.read_annotations(path)
        assert dims == (64, 64)
        np.testing.assert_array_equal(out_pts, np.array(pts))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(DataError):
            formats.read_annotations(path)

    def test_out_of_bounds_point(self, tmp_path):
        path = tmp_path / "oob.json"
        path.write_text('{"w": 8, "h": 8, "points": [[9.0, 1.0]]}')
        with pytest.raises(DataError):
            formats.read_annotations(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "mk.json"
        path.write_text('{"w": 8, "points": []}')
        with pytest.raises(DataError):
            formats.read_annotations(path)
