import numpy as np
import pytest

from recapprox.core import (
    ClassMask,
    DataError,
    Image,
    checksum,
    decode_pnm,
    encode_pnm,
    from_one_hot,
    one_hot,
    seeded_rng,
)


def test_one_hot_small():
    planes = one_hot(ClassMask(np.array([[0, 1]]), 2))
    np.testing.assert_array_equal(planes, [[[1, 0]], [[0, 1]]])


def test_one_hot_uniform_mask():
    planes = one_hot(ClassMask(np.zeros((4, 5)), 3))
    assert planes[0].all() and not planes[1:].any()


def test_one_hot_matches_pixel_scan_and_inverts():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(8, 8))
    mask = ClassMask(labels, 3)
    planes = one_hot(mask)
    for r in range(8):
        for c in range(8):
            for k in range(3):
                assert planes[k, r, c] == (labels[r, c] == k)
    assert (planes.sum(axis=0) == 1).all()
    assert from_one_hot(planes) == mask


def test_class_mask_validation():
    with pytest.raises(ValueError):
        ClassMask(np.array([[0, 3]]), 3)
    with pytest.raises(ValueError):
        ClassMask(np.zeros(4), 2)


def test_image_validation():
    with pytest.raises(ValueError):
        Image(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        Image(np.array([[np.nan]]))
    assert Image(np.zeros((3, 4))).channels == 1


def test_rng_determinism_and_distinctness():
    a = seeded_rng(0).random(100)
    b = seeded_rng(0).random(100)
    c = seeded_rng(1).random(100)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(seeded_rng(0, 1).random(10), seeded_rng(0, 2).random(10))


def test_rng_stream_is_pinned():
    # PCG64 seeded through SeedSequence([0]) is fixed by numpy across platforms
    assert seeded_rng(0).integers(0, 2**32, size=3).tolist() == seeded_rng(0).integers(0, 2**32, size=3).tolist()
    first = seeded_rng(42).random()
    assert first == np.random.Generator(np.random.PCG64(np.random.SeedSequence([42]))).random()


def test_pnm_round_trip_gray_and_rgb():
    rng = np.random.default_rng(1)
    gray = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
    rgb = rng.integers(0, 256, size=(4, 3, 3), dtype=np.uint8)
    assert np.array_equal(decode_pnm(encode_pnm(gray)), gray)
    assert np.array_equal(decode_pnm(encode_pnm(rgb)), rgb)
    assert encode_pnm(gray).startswith(b"P5\n7 5\n255\n")


def test_pnm_header_comments():
    payload = b"P5\n# a comment\n2 1\n255\n\x01\x02"
    np.testing.assert_array_equal(decode_pnm(payload), [[1, 2]])


def test_pnm_rejects_bad_input():
    with pytest.raises(DataError):
        decode_pnm(b"P2\n1 1\n255\n0")
    with pytest.raises(DataError):
        decode_pnm(b"P5\n2 2\n255\n\x00")
    with pytest.raises(DataError):
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00")


def test_checksum_is_64_bit_hex():
    assert len(checksum(b"abc")) == 16
    assert checksum(b"abc") != checksum(b"abd")
