"""Versioned binary containers for feature dumps and model parameters.

Two layouts share the same conventions (little-endian, 16-byte magic/version
header):

* feature dump: header, u32 ndim, u32 dims..., row-major float32 data
* named-tensor archive (models, UBM/T, checkpoints): header, u32 entry count,
  then per entry a length-prefixed UTF-8 name, a one-byte kind tag
  (b'8' float64, b'4' float32, b'T' raw text), u32 ndim + dims, payload.
"""

import struct

import numpy as np

from .errors import FormatError, VersionMismatchError

FEATURE_MAGIC = b"SPEECHQA-FTR"
MODEL_MAGIC = b"SPEECHQA-MDL"
VERSION = 1

_KIND_DTYPE = {b"8": "<f8", b"4": "<f4"}


def _write_header(f, magic):
    f.write(magic + struct.pack("<I", VERSION))


def _read_header(f, magic, path):
    head = f.read(16)
    if len(head) != 16 or head[:12] != magic:
        raise FormatError(f"{path}: bad magic, not a {magic.decode()} file")
    (version,) = struct.unpack("<I", head[12:16])
    if version != VERSION:
        raise VersionMismatchError(
            f"{path}: container version {version}, reader supports {VERSION}"
        )


def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated container")
    return data


def write_feature_file(path, array):
    """Row-major float32 dump of one feature array."""
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        _write_header(f, FEATURE_MAGIC)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.tobytes())


def read_feature_file(path):
    with open(path, "rb") as f:
        _read_header(f, FEATURE_MAGIC, path)
        (ndim,) = struct.unpack("<I", _read_exact(f, 4, path))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, path))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(f, 4 * n, path), dtype="<f4")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after feature data")
    return data.reshape(shape).astype(np.float64)


def write_archive(path, entries):
    """Write an ordered dict of name -> ndarray (float64/float32) or str."""
    with open(path, "wb") as f:
        _write_header(f, MODEL_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, value in entries.items():
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw_name)) + raw_name)
            if isinstance(value, str):
                raw = value.encode("utf-8")
                f.write(b"T" + struct.pack("<I", len(raw)) + raw)
            else:
                a = np.ascontiguousarray(value)
                kind = b"4" if a.dtype == np.float32 else b"8"
                a = a.astype(_KIND_DTYPE[kind], copy=False)
                f.write(kind + struct.pack("<I", a.ndim))
                f.write(struct.pack(f"<{a.ndim}I", *a.shape))
                f.write(a.tobytes())


def read_archive(path):
    entries = {}
    with open(path, "rb") as f:
        _read_header(f, MODEL_MAGIC, path)
        (count,) = struct.unpack("<I", _read_exact(f, 4, path))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            kind = _read_exact(f, 1, path)
            if kind == b"T":
                (text_len,) = struct.unpack("<I", _read_exact(f, 4, path))
                entries[name] = _read_exact(f, text_len, path).decode("utf-8")
            elif kind in _KIND_DTYPE:
                (ndim,) = struct.unpack("<I", _read_exact(f, 4, path))
                shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, path))
                n = int(np.prod(shape)) if ndim else 1
                size = int(_KIND_DTYPE[kind][2]) * n
                data = np.frombuffer(_read_exact(f, size, path), dtype=_KIND_DTYPE[kind])
                entries[name] = data.reshape(shape).astype(np.float64)
            else:
                raise FormatError(f"{path}: unknown entry kind {kind!r}")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after last entry")
    return entries
