"""Flat binary weight files (``CLCK1``).

Layout, all little-endian:

* magic ``b"CLCK1"``
* version: u16 (currently 1)
* zero or more records: name length u16, name bytes (UTF-8), rank u8,
  one u32 extent per axis, then the float64 payload in row-major order

Records are written sorted by name so equal weight dicts always produce
equal bytes.
"""

import struct

import numpy as np

MAGIC = b"CLCK1"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the CLCK1 magic."""


class CheckpointVersionError(CheckpointError):
    """File version is not one this reader understands."""


class CheckpointTruncationError(CheckpointError):
    """File ends in the middle of a record."""


def dumps(arrays):
    """Serialize a name -> ndarray mapping to bytes."""
    out = [MAGIC, struct.pack("<H", VERSION)]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        shape = arr.shape
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError("parameter name too long: %r" % name[:40])
        if len(shape) > 0xFF:
            raise ValueError("array rank %d too large for %r" % (len(shape), name))
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", len(shape)))
        out.append(struct.pack("<%dI" % len(shape), *shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def loads(blob):
    """Parse bytes produced by :func:`dumps` back into a dict."""
    if len(blob) < len(MAGIC):
        raise CheckpointTruncationError("file shorter than the magic")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointMagicError("bad magic %r" % blob[: len(MAGIC)])
    pos = len(MAGIC)
    if len(blob) < pos + 2:
        raise CheckpointTruncationError("file ends before the version field")
    (version,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if version != VERSION:
        raise CheckpointVersionError(
            "unsupported version %d (reader supports %d)" % (version, VERSION)
        )

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointTruncationError(
                "file ends inside %s (need %d bytes at offset %d)" % (what, n, pos)
            )
        piece = blob[pos : pos + n]
        pos += n
        return piece

    arrays = {}
    while pos < len(blob):
        (nlen,) = struct.unpack("<H", take(2, "a name length"))
        name = take(nlen, "a name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "a rank byte"))
        shape = struct.unpack("<%dI" % rank, take(4 * rank, "the extents"))
        count = 1
        for n in shape:
            count *= n
        payload = take(8 * count, "the payload of %r" % name)
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return arrays


def save(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
