import struct

import numpy as np
import pytest

from ipsfuse.checkpoint import FORMAT_VERSION, MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from ipsfuse.imageio import MalformedHeaderError, TruncatedPayloadError, read_image, write_image


def test_p5_example(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5 2 2 255\n" + bytes([0, 255, 128, 64]))
    img = read_image(p)
    assert img.shape == (2, 2, 1)
    np.testing.assert_array_equal(img[:, :, 0], [[0, 1], [128 / 255, 64 / 255]])


def test_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n1 1\n# another\n255\n" + bytes([51]))
    assert read_image(p)[0, 0, 0] == pytest.approx(0.2)


def test_sixteen_bit(tmp_path):
    p = tmp_path / "w.pgm"
    p.write_bytes(b"P5\n2 1\n65535\n" + struct.pack(">HH", 1, 65535))
    np.testing.assert_array_equal(read_image(p)[0, :, 0], [1 / 65535, 1.0])


def test_ppm_channels(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 51]))
    np.testing.assert_allclose(read_image(p)[0, 0], [1.0, 0.0, 0.2])


@pytest.mark.parametrize("shape", [(5, 7), (4, 3, 3)])
def test_round_trip_8bit_bit_exact(tmp_path, shape):
    r = np.random.default_rng(0)
    raw = r.integers(0, 256, size=shape).astype(np.uint8)
    p = write_image(tmp_path / "r.pnm", raw / 255.0)
    back = read_image(p)
    assert np.array_equal(np.rint(back * 255).astype(np.uint8).reshape(shape), raw)
    write_image(tmp_path / "again.pnm", back)
    assert (tmp_path / "again.pnm").read_bytes() == p.read_bytes()


def test_round_trip_16bit(tmp_path):
    raw = np.arange(0, 65536, 4096, dtype=np.float64).reshape(4, 4) / 65535
    back = read_image(write_image(tmp_path / "s.pgm", raw, bits=16))
    np.testing.assert_array_equal(back[:, :, 0], raw)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "nope.pgm")


@pytest.mark.parametrize("blob", [b"P2\n1 1\n255\n0", b"P5\n1\n", b"P5\nx 1 255\n\x00", b"P5\n1 1 70000\n\x00\x00",
                                  b"P5\n0 1 255\n", b"P5\n1 1 255"])
def test_malformed_headers(tmp_path, blob):
    p = tmp_path / "bad.pgm"
    p.write_bytes(blob)
    with pytest.raises(MalformedHeaderError):
        read_image(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n3 3\n255\n" + bytes(5))
    with pytest.raises(TruncatedPayloadError, match="5 bytes, expected 9"):
        read_image(p)


def test_write_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        write_image(tmp_path / "x.pgm", np.zeros((2, 2, 2)))


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    r = np.random.default_rng(0)
    tensors = {"param": {"w": r.normal(size=(2, 3)).astype(np.float32), "b": np.arange(4.0)},
               "adam_m": {"w": np.zeros((2, 3), np.float32)}}
    p = save_checkpoint(tmp_path / "c.ipsf", model_config={"c": 1}, tensors=tensors, iteration=42,
                        train_config={"lr": 0.1}, optimizer={"step": 42})
    ck = load_checkpoint(p)
    assert ck["iteration"] == 42 and ck["model_config"] == {"c": 1} and ck["optimizer"] == {"step": 42}
    for g, named in tensors.items():
        for k, v in named.items():
            assert ck["arrays"][g][k].dtype == v.dtype
            assert np.array_equal(ck["arrays"][g][k], v)
    assert p.read_bytes()[:8] == MAGIC


def test_checkpoint_payload_is_little_endian(tmp_path):
    p = save_checkpoint(tmp_path / "c.ipsf", model_config={}, tensors={"param": {"x": np.array([1.0], ">f8")}},
                        iteration=0)
    assert p.read_bytes().endswith(struct.pack("<d", 1.0))


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ipsf"
    p.write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_bad_version(tmp_path):
    p = save_checkpoint(tmp_path / "c.ipsf", model_config={}, tensors={}, iteration=0)
    buf = bytearray(p.read_bytes())
    buf[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    p.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p = save_checkpoint(tmp_path / "c.ipsf", model_config={}, tensors={"param": {"x": np.zeros(10)}}, iteration=0)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="past end"):
        load_checkpoint(p)
