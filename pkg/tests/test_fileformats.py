import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from flatmatch.errors import FormatError, TruncationError
from flatmatch.fileformats import (
    IMAGE_MAGIC,
    WEIGHT_MAGIC,
    Image,
    atomic_write,
    decode_weights,
    encode_image,
    encode_weights,
    read_image,
    read_sections,
    write_image,
    write_sections,
)

names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)
payloads = arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, width=64))


class TestWeights:
    @settings(max_examples=60, deadline=None)
    @given(st.dictionaries(names, payloads, max_size=4))
    def test_round_trip_bit_exact(self, sections):
        back = decode_weights(encode_weights(sections))
        assert list(back) == list(sections)
        for k in sections:
            assert back[k].shape == np.shape(sections[k])
            assert back[k].tobytes() == np.asarray(sections[k], dtype="<f8").tobytes()

    def test_layout(self):
        blob = encode_weights({"ab": np.array([[1.5, -2.0]])})
        body = struct.pack("<I", 2) + b"ab" + struct.pack("<I", 2) + struct.pack("<2I", 1, 2)
        body += struct.pack("<2d", 1.5, -2.0)
        assert blob == WEIGHT_MAGIC + struct.pack("<I", 1) + body + struct.pack("<I", zlib.crc32(body))

    def test_bad_magic(self):
        with pytest.raises(FormatError) as err:
            decode_weights(b"NOTMAGIC" + bytes(8))
        assert err.value.offset == 0
        assert "offset 0" in str(err.value)

    def test_every_truncation_reports_offset(self):
        blob = encode_weights({"w": np.arange(6.0).reshape(2, 3), "b": np.zeros(2)})
        for cut in range(len(WEIGHT_MAGIC), len(blob)):
            with pytest.raises(TruncationError) as err:
                decode_weights(blob[:cut])
            assert 0 <= err.value.offset <= cut

    def test_corrupted_payload_fails_checksum(self):
        blob = bytearray(encode_weights({"w": np.arange(4.0)}))
        blob[-10] ^= 0x01
        with pytest.raises(FormatError, match="checksum"):
            decode_weights(bytes(blob))

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_weights(encode_weights({"w": np.ones(2)}) + b"\x00")

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "w.bin"
        write_sections(path, {"x": np.eye(3)})
        np.testing.assert_array_equal(read_sections(path)["x"], np.eye(3))
        assert not list(tmp_path.glob("*.tmp"))


class TestAtomicWrite:
    def test_replaces_whole_file(self, tmp_path):
        path = tmp_path / "out.txt"
        path.write_text("old content that is longer")
        atomic_write(path, b"new")
        assert path.read_bytes() == b"new"

    def test_failed_write_leaves_original(self, tmp_path):
        path = tmp_path / "out.txt"
        path.write_text("keep")
        with pytest.raises(TypeError):
            atomic_write(path, "not bytes")
        assert path.read_text() == "keep"
        assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


class TestImages:
    def test_pgm_round_trip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, size=(5, 7)) / 255.0
        write_image(tmp_path / "a.pgm", Image(px))
        np.testing.assert_allclose(read_image(tmp_path / "a.pgm").pixels[:, :, 0], px, atol=1e-12)

    def test_ppm_and_gray(self, tmp_path):
        px = np.random.default_rng(1).integers(0, 256, size=(4, 3, 3)) / 255.0
        write_image(tmp_path / "a.ppm", Image(px))
        img = read_image(tmp_path / "a.ppm")
        assert img.channels == 3
        np.testing.assert_allclose(img.to_gray().pixels[:, :, 0], px @ [0.299, 0.587, 0.114])

    def test_pnm_comments_and_16bit(self):
        raster = struct.pack(">4H", 0, 1000, 2000, 4000)
        img = read_image_bytes(b"P5\n# made by hand\n2 2\n4000\n" + raster)
        np.testing.assert_allclose(img.pixels[:, :, 0], [[0, 0.25], [0.5, 1.0]])

    def test_f64_round_trip(self, tmp_path):
        px = np.random.default_rng(2).uniform(size=(3, 4))
        write_image(tmp_path / "a.f64", Image(px))
        data = (tmp_path / "a.f64").read_bytes()
        assert data[:8] == IMAGE_MAGIC and len(data) == 16 + 8 * 12
        np.testing.assert_array_equal(read_image(tmp_path / "a.f64").pixels[:, :, 0], px)

    def test_truncated_raster(self):
        with pytest.raises(TruncationError):
            read_image_bytes(b"P5\n4 4\n255\n" + bytes(10))

    def test_f64_trailing_bytes(self):
        blob = encode_image(Image(np.zeros((2, 2))), "f64") + b"\x00"
        with pytest.raises(FormatError, match="trailing"):
            read_image_bytes(blob)

    def test_not_an_image(self):
        with pytest.raises(FormatError):
            read_image_bytes(b"GIF89a....")

    def test_bad_shape(self):
        with pytest.raises(FormatError):
            Image(np.zeros((2, 2, 2)))


def read_image_bytes(data):
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "img.bin"
        path.write_bytes(data)
        return read_image(path)
