import json
import struct

import numpy as np
import pytest

from gliosynth.errors import InvalidInputError
from gliosynth.image import (MAGIC, BinaryMask, Image2D, read_image, read_mask,
                             write_image, write_mask)


class TestImage2D:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            Image2D(pixels=np.zeros((2, 2, 2)))
        with pytest.raises(InvalidInputError):
            Image2D(pixels=np.array([[np.nan, 0.0]]))
        with pytest.raises(InvalidInputError):
            Image2D(pixels=np.zeros((2, 2)), pixel_spacing=0.0)

    def test_dimensions(self):
        img = Image2D(pixels=np.zeros((3, 5)), pixel_spacing=0.5)
        assert img.width == 5 and img.height == 3
        assert img.pixel_area_mm2() == 0.25


class TestFileFormat:
    def test_roundtrip_preserves_float32_payload(self, tmp_path):
        rng = np.random.default_rng(0)
        img = Image2D(pixels=rng.uniform(size=(13, 9)), pixel_spacing=0.75)
        path = tmp_path / "x.img"
        write_image(path, img)
        back = read_image(path)
        assert back.width == 9 and back.height == 13
        assert back.pixel_spacing == 0.75
        np.testing.assert_array_equal(back.pixels,
                                      img.pixels.astype(np.float32).astype(float))

    def test_layout_is_exactly_as_documented(self, tmp_path):
        img = Image2D(pixels=np.array([[0.0, 1.0], [0.5, 0.25]]),
                      pixel_spacing=2.0)
        path = tmp_path / "x.img"
        write_image(path, img)
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + hlen])
        assert header == {"width": 2, "height": 2, "pixel_spacing_mm": 2.0,
                          "dtype": "f32le"}
        payload = np.frombuffer(raw[12 + hlen:], dtype="<f4")
        np.testing.assert_array_equal(payload, [0.0, 1.0, 0.5, 0.25])

    def test_write_is_deterministic(self, tmp_path):
        img = Image2D(pixels=np.linspace(0, 1, 12).reshape(3, 4))
        write_image(tmp_path / "a.img", img)
        write_image(tmp_path / "b.img", img)
        assert (tmp_path / "a.img").read_bytes() == (tmp_path / "b.img").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.img"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(InvalidInputError):
            read_image(path)

    def test_truncated_payload(self, tmp_path):
        img = Image2D(pixels=np.zeros((4, 4)))
        path = tmp_path / "x.img"
        write_image(path, img)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(InvalidInputError):
            read_image(path)

    def test_mask_roundtrip(self, tmp_path):
        bits = np.random.default_rng(1).uniform(size=(6, 6)) > 0.5
        mask = BinaryMask(bits=bits, pixel_spacing=1.5)
        write_mask(tmp_path / "m.img", mask)
        back = read_mask(tmp_path / "m.img")
        np.testing.assert_array_equal(back.bits, bits)
        assert back.pixel_spacing == 1.5
        assert back.area_mm2() == bits.sum() * 2.25
