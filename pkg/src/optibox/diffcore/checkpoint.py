"""Lossless binary checkpoints for named float64 arrays.

Layout (all integers little-endian):

    bytes 0-3   magic  b"OBCK"
    bytes 4-7   format version, uint32 (currently 1)
    bytes 8-11  entry count, uint32
    then per entry:
        uint16  name length in bytes
        name    utf-8
        uint8   ndim
        uint32  per-dimension sizes (ndim of them)
        data    float64 little-endian, C row-major order

Entry order is preserved on round-trip, and values survive bit-exactly.
"""

import struct

import numpy as np

from ..errors import DataFormatError

MAGIC = b"OBCK"
VERSION = 1


def save_arrays(path, arrays):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            # ascontiguousarray would promote rank-0 to rank-1; keep scalars.
            a = np.asarray(arr, dtype=np.float64)
            if a.ndim:
                a = np.ascontiguousarray(a)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_arrays(path):
    arrays = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise DataFormatError("not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
            raw = _read_exact(f, n_bytes, f"data for {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(
                np.float64
            ).reshape(shape)
        if f.read(1):
            raise DataFormatError("trailing bytes after last checkpoint entry")
    return arrays


def save_tensors(path, named_tensors):
    save_arrays(path, {k: t.data for k, t in named_tensors.items()})


def load_into(path, named_tensors):
    """Load a checkpoint into existing Tensors, validating names and shapes."""
    arrays = load_arrays(path)
    missing = set(named_tensors) - set(arrays)
    extra = set(arrays) - set(named_tensors)
    if missing or extra:
        raise DataFormatError(
            f"checkpoint entries do not match model (missing={sorted(missing)}, "
            f"unexpected={sorted(extra)})"
        )
    for name, t in named_tensors.items():
        if arrays[name].shape != t.data.shape:
            raise DataFormatError(
                f"shape mismatch for {name!r}: checkpoint {arrays[name].shape} "
                f"vs model {t.data.shape}"
            )
        t.data = arrays[name]
