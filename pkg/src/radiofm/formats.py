"""Readers and writers for the package's little-endian binary formats.

RFM1  named float64 tensors (model checkpoints)
RIQ1  complex baseband recordings stored as interleaved float32 I/Q
RSP1  a single float32 tensor (spectrograms, CSI tensors, label masks)
P5    binary portable graymap, for eyeballing resource grids
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

RFM_MAGIC = b"RFM1"
RIQ_MAGIC = b"RIQ1"
RSP_MAGIC = b"RSP1"


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _check_magic(r: _Reader, magic: bytes) -> None:
    got = r.take(4) if len(r.buf) >= 4 else r.buf
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")


# RFM1 -----------------------------------------------------------------------


def encode_checkpoint(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [RFM_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf, "RFM1")
    _check_magic(r, RFM_MAGIC)
    (count,) = r.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after RFM1 entries")
    return out


def save_checkpoint(path, entries: Mapping[str, np.ndarray], config: dict | None = None) -> None:
    """Write ``entries`` to ``path``; ``config`` goes to a ``.json`` sidecar."""
    path = Path(path)
    path.write_bytes(encode_checkpoint(entries))
    if config is not None:
        sidecar_path(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    entries = decode_checkpoint(path.read_bytes())
    side = sidecar_path(path)
    config = json.loads(side.read_text()) if side.exists() else None
    return entries, config


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


# RIQ1 -----------------------------------------------------------------------


def encode_iq(samples: np.ndarray, sample_rate_hz: float, center_freq_hz: float) -> bytes:
    samples = np.asarray(samples)
    inter = np.empty(2 * samples.size, dtype="<f4")
    inter[0::2] = samples.real
    inter[1::2] = samples.imag
    header = RIQ_MAGIC + struct.pack("<ddQ", sample_rate_hz, center_freq_hz, samples.size)
    return header + inter.tobytes()


def decode_iq(buf: bytes) -> tuple[np.ndarray, float, float]:
    r = _Reader(buf, "RIQ1")
    _check_magic(r, RIQ_MAGIC)
    fs, fc, n = r.unpack("<ddQ")
    inter = np.frombuffer(r.take(8 * n), dtype="<f4")
    samples = inter[0::2].astype(np.float32) + 1j * inter[1::2].astype(np.float32)
    return samples.astype(np.complex64), fs, fc


# RSP1 -----------------------------------------------------------------------


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    return (RSP_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + np.ascontiguousarray(arr).tobytes())


def decode_tensor(buf: bytes) -> np.ndarray:
    r = _Reader(buf, "RSP1")
    _check_magic(r, RSP_MAGIC)
    (rank,) = r.unpack("<B")
    dims = r.unpack(f"<{rank}I") if rank else ()
    n = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32)
    return data.reshape(dims)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# P5 -------------------------------------------------------------------------


def write_pgm(path, img: np.ndarray, scale: bool = True) -> None:
    """Write a 2-D array as an 8-bit P5 graymap.

    With ``scale`` the values are min-max mapped to 0..255, otherwise they are
    clipped to that range as-is.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("P5 images must be 2-D")
    if scale:
        lo, hi = float(img.min()), float(img.max())
        img = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo) * 255
    pix = np.round(np.clip(img, 0, 255)).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P5"):
        raise FormatError("not a P5 graymap")
    # header written by write_pgm: three newline-terminated lines
    magic, size, maxval, body = buf.split(b"\n", 3)
    w, h = (int(v) for v in size.split())
    if int(maxval) != 255:
        raise FormatError("only 8-bit graymaps are supported")
    if len(body) < w * h:
        raise FormatError("truncated P5 payload")
    return np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w)
