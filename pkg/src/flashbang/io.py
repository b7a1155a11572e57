"""Readers and writers for the on-disk formats: binary PGM, float WAV, JSON."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from scipy.io import wavfile

FORMAT_VERSION = 1


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit grayscale image as binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def _pgm_tokens(data: bytes, count: int):
    # header tokens are whitespace separated; '#' starts a comment to end of line
    tokens = []
    pos = 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset)
    return raster.reshape(h, w).copy()


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Mono 32-bit float PCM."""
    wavfile.write(str(path), int(sample_rate), np.asarray(samples, dtype=np.float32))


def read_wav(path) -> tuple[np.ndarray, int]:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype.kind == "i":
        data = data / float(np.iinfo(data.dtype).max)
    return np.asarray(data, dtype=np.float64), int(rate)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps_json(payload) -> str:
    """Sorted, indented JSON; NaN and infinities become null."""
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False)


def write_json(path, payload) -> None:
    Path(path).write_text(dumps_json(payload) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
