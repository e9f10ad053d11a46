import struct

import numpy as np
import pytest

from aetlab import data
from aetlab.checkpoint import load_checkpoint, save_checkpoint
from aetlab.errors import FormatError, InputError


def crafted_cifar(n, seed=0):
    """Hand-assembled CIFAR-10 records: label byte then 3072 pixel bytes."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    pixels = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    blob = b"".join(bytes([labels[i]]) + pixels[i].tobytes() for i in range(n))
    return blob, labels, pixels


def crafted_idx_images(n, h, w, seed=0):
    rng = np.random.default_rng(seed)
    pix = rng.integers(0, 256, size=(n, h, w), dtype=np.uint8)
    return b"\x00\x00\x08\x03" + struct.pack(">III", n, h, w) + pix.tobytes(), pix


class TestCifar:
    def test_parse_crafted(self, tmp_path):
        blob, labels, pixels = crafted_cifar(5)
        p = tmp_path / "batch.bin"
        p.write_bytes(blob)
        ds = data.load_cifar10_binary(p)
        np.testing.assert_array_equal(ds.labels, labels)
        # channel planes in R, G, B order, row-major inside each plane
        np.testing.assert_array_equal(np.round(ds.images * 255).astype(np.uint8).reshape(5, -1), pixels)
        assert ds.images[2, 1, 0, 0] == pixels[2, 1024] / 255.0

    def test_roundtrip_bytes(self, tmp_path):
        blob, _, _ = crafted_cifar(7, seed=3)
        src = tmp_path / "a.bin"
        src.write_bytes(blob)
        out = tmp_path / "b.bin"
        data.write_cifar10_binary(out, data.load_cifar10_binary(src))
        assert out.read_bytes() == blob

    def test_truncated_record(self, tmp_path):
        blob, _, _ = crafted_cifar(3)
        p = tmp_path / "t.bin"
        p.write_bytes(blob[:-100])
        with pytest.raises(FormatError, match=r"byte offset 6146"):
            data.load_cifar10_binary(p)

    def test_bad_label(self, tmp_path):
        blob, _, _ = crafted_cifar(3)
        blob = bytearray(blob)
        blob[3073] = 12
        p = tmp_path / "l.bin"
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match=r"label 12 .*byte offset 3073"):
            data.load_cifar10_binary(p)

    def test_exit_code(self):
        assert FormatError("x").exit_code == 3


class TestIdx:
    def test_parse_crafted_images(self, tmp_path):
        blob, pix = crafted_idx_images(4, 5, 6)
        p = tmp_path / "img.idx"
        p.write_bytes(blob)
        arr = data.load_idx(p)
        assert arr.shape == (4, 5, 6)
        np.testing.assert_array_equal(np.round(arr * 255).astype(np.uint8), pix)

    def test_parse_crafted_labels(self, tmp_path):
        p = tmp_path / "lab.idx"
        p.write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 3) + bytes([7, 0, 2]))
        np.testing.assert_array_equal(data.load_idx(p), [7, 0, 2])

    def test_roundtrip_bytes(self, tmp_path):
        blob, _ = crafted_idx_images(3, 4, 4, seed=9)
        src = tmp_path / "a.idx"
        src.write_bytes(blob)
        out = tmp_path / "b.idx"
        data.write_idx(out, data.load_idx(src))
        assert out.read_bytes() == blob

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.idx"
        p.write_bytes(b"\x00\x00\x0d\x03" + struct.pack(">III", 1, 1, 1) + b"\x00")
        with pytest.raises(FormatError, match=r"magic 0x00000d03 at byte offset 0"):
            data.load_idx(p)

    def test_short_payload(self, tmp_path):
        blob, _ = crafted_idx_images(2, 3, 3)
        p = tmp_path / "s.idx"
        p.write_bytes(blob[:-4])
        with pytest.raises(FormatError, match=r"byte offset 30 .*expected 34"):
            data.load_idx(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "h.idx"
        p.write_bytes(b"\x00\x00\x08\x03\x00\x00")
        with pytest.raises(FormatError, match="offset 4"):
            data.load_idx(p)

    def test_dataset_pairing(self, tmp_path):
        blob, _ = crafted_idx_images(3, 4, 4)
        (tmp_path / "i").write_bytes(blob)
        (tmp_path / "l").write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 3) + bytes([1, 0, 1]))
        ds = data.load_idx_dataset(tmp_path / "i", tmp_path / "l")
        assert ds.images.shape == (3, 1, 4, 4) and ds.class_count == 2


class TestSynthetic:
    def test_shapes_and_range(self):
        ds = data.synth_shapes(60, 32, 6, np.random.default_rng(0))
        assert ds.images.shape == (60, 1, 32, 32)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        np.testing.assert_array_equal(np.bincount(ds.labels), [10] * 6)

    def test_deterministic(self):
        a = data.synth_shapes(12, 16, 3, np.random.default_rng(4))
        b = data.synth_shapes(12, 16, 3, np.random.default_rng(4))
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_every_image_has_ink(self):
        ds = data.synth_shapes(30, 32, 6, np.random.default_rng(1))
        assert (ds.images.reshape(30, -1).max(axis=1) > 0.5).all()

    def test_invalid(self):
        with pytest.raises(InputError):
            data.synth_shapes(10, 32, 7, np.random.default_rng(0))
        with pytest.raises(InputError):
            data.synth_shapes(2, 32, 3, np.random.default_rng(0))


def test_dataset_validation():
    with pytest.raises(InputError):
        data.Dataset(np.full((1, 1, 2, 2), 1.5), None, 1)
    with pytest.raises(InputError):
        data.Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 3]), 2)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        t = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(3.5), "c": np.zeros((0, 2))}
        save_checkpoint(tmp_path / "c.bin", t, {"epoch": 3})
        back, meta = load_checkpoint(tmp_path / "c.bin")
        assert meta == {"epoch": 3}
        assert list(back) == ["a", "b", "c"]
        for k in t:
            np.testing.assert_array_equal(back[k], t[k])

    def test_bytes_independent_of_insertion_order(self, tmp_path):
        x = {"a": np.ones(2), "b": np.zeros(3)}
        save_checkpoint(tmp_path / "1", x, {"k": 1, "j": 2})
        save_checkpoint(tmp_path / "2", dict(reversed(list(x.items()))), {"j": 2, "k": 1})
        assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + b"\x00" * 8)
        with pytest.raises(FormatError, match="offset 0"):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"w": np.ones(4)}, {})
        blob = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="truncated checkpoint at offset"):
            load_checkpoint(tmp_path / "c")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"w": np.ones(1)}, {})
        with open(tmp_path / "c", "ab") as fh:
            fh.write(b"zz")
        with pytest.raises(FormatError, match="2 trailing bytes"):
            load_checkpoint(tmp_path / "c")
