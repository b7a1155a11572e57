import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flashbang.io import read_json, read_pgm, read_wav, write_json, write_pgm, write_wav


@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_pgm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pgm") / "a.pgm"
    write_pgm(path, img)
    assert np.array_equal(read_pgm(path), img)


def test_pgm_header_comments(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n4 3\n# max\n255\n" + img.tobytes())
    assert np.array_equal(read_pgm(path), img)


def test_pgm_rejects_other_formats(tmp_path):
    path = tmp_path / "p2.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        read_pgm(path)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 3)))


def test_wav_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 4800).astype(np.float32)
    write_wav(tmp_path / "a.wav", x, 48000)
    y, fs = read_wav(tmp_path / "a.wav")
    assert fs == 48000
    assert np.array_equal(y, x.astype(np.float64))


def test_json_sorted_and_nan_to_null(tmp_path):
    write_json(tmp_path / "a.json", {"b": np.float64(1.5), "a": [math.nan, np.int64(2)], "c": np.arange(2)})
    text = (tmp_path / "a.json").read_text()
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert read_json(tmp_path / "a.json") == {"a": [None, 2], "b": 1.5, "c": [0, 1]}
