"""Binary checkpoint format "AFCK".

Layout, all little-endian:
    magic      4 bytes  b"AFCK"
    version    u8       currently 1
    config     u32 length + utf8 text (key=value lines echoing the run config)
    count      u32      number of named blobs
    per blob:  u16 name length, utf8 name, u8 rank, rank * u32 dims,
               raw float64 data in row-major order

Blobs cover every learnable parameter plus batch-norm running statistics, so
a round trip is bit-lossless.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"AFCK"
VERSION = 1


def save_checkpoint(path, blobs: dict[str, np.ndarray], config_text: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        enc = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nm = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def _read(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what} "
                          f"at offset {fh.tell() - len(data)}")
    return data


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Returns (name -> array, config text)."""
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise FormatError("bad magic at offset 0: not an AFCK checkpoint")
        version = struct.unpack("<B", _read(fh, 1, "version"))[0]
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version} at offset 4")
        (cfg_len,) = struct.unpack("<I", _read(fh, 4, "config length"))
        config_text = _read(fh, cfg_len, "config").decode("utf-8")
        (count,) = struct.unpack("<I", _read(fh, 4, "blob count"))
        blobs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank, "dims"))
            n_bytes = 8 * int(np.prod(dims)) if rank else 8
            raw = _read(fh, n_bytes, f"data of {name!r}")
            blobs[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"unexpected trailing bytes at offset {fh.tell() - 1}")
    return blobs, config_text


def net_blobs(net) -> dict[str, np.ndarray]:
    """Every parameter and running statistic of a network, by name."""
    blobs = {name: p.data for name, p in net.params().items()}
    blobs.update(net.state())
    return blobs
