import numpy as np
import pytest

from polarseg import rten


@pytest.mark.parametrize("dtype,shape", [(np.float32, (128, 128)), (np.float64, (3, 4, 5)),
                                         (np.complex64, (4, 2, 3)), (np.uint8, (7,)),
                                         (np.float32, ())])
def test_round_trip_bit_exact(tmp_path, dtype, shape):
    rng = np.random.default_rng(0)
    a = rng.standard_normal(shape)
    if np.dtype(dtype).kind == "c":
        a = a + 1j * rng.standard_normal(shape)
    a = (a * 50).astype(dtype)
    rten.write(tmp_path / "t.rten", a)
    b = rten.read(tmp_path / "t.rten")
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_header_of_complex_cube_is_32_bytes():
    blob = rten.to_bytes(np.zeros((128, 128, 64), np.complex64))
    assert len(blob) == 32 + 128 * 128 * 64 * 8
    assert blob[:4] == b"RTEN" and blob[4:6] == b"\x01\x00" and blob[6] == 2 and blob[7] == 3
    assert int.from_bytes(blob[24:32], "little") == 64


def test_truncated_payload_names_byte_counts():
    blob = rten.to_bytes(np.zeros((4, 4), np.float32))
    with pytest.raises(rten.RtenError, match=r"offset 24 should be 64 bytes, got 60"):
        rten.from_bytes(blob[:-4])


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XTEN" + b[4:], "bad magic"),
    (lambda b: b[:4] + b"\x02\x00" + b[6:], "version 2 at offset 4"),
    (lambda b: b[:6] + b"\x09" + b[7:], "dtype code 9 at offset 6"),
    (lambda b: b[:12], "dims truncated"),
    (lambda b: b[:5], "header truncated"),
    (lambda b: b + b"\x00", "got 65"),
])
def test_reader_rejects_corruption(mutate, msg):
    blob = rten.to_bytes(np.zeros((4, 4), np.float32))
    with pytest.raises(rten.RtenError, match=msg):
        rten.from_bytes(mutate(blob))


def test_unsupported_dtype():
    with pytest.raises(rten.RtenError):
        rten.to_bytes(np.zeros(3, np.int32))


def test_netpbm_round_trip(tmp_path):
    mask = (np.random.default_rng(1).random((128, 128)) > 0.5).astype(np.uint8) * 255
    rten.write_pgm(tmp_path / "m.pgm", mask)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n128 128\n255\n")
    np.testing.assert_array_equal(rten.read_pgm(tmp_path / "m.pgm"), mask)
    rgb = np.random.default_rng(2).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    rten.write_ppm(tmp_path / "c.ppm", rgb)
    np.testing.assert_array_equal(rten.read_ppm(tmp_path / "c.ppm"), rgb)
    with pytest.raises(ValueError):
        rten.read_ppm(tmp_path / "m.pgm")
    with pytest.raises(ValueError):
        rten.write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
