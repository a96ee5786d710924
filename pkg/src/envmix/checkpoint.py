"""Flat key-value model checkpoints.

Layout: a plain-text header (one ``key: value`` line per entry, started by a
magic line and terminated by a blank line) followed by one record per array:
an ascii line ``name ndim dim0 dim1 ...`` and then the raw little-endian
float64 payload. Everything needed to parse the file is in the file.
"""

from __future__ import annotations

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint"]

MAGIC = b"envmix-checkpoint v1"


def save_checkpoint(path, header: dict, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        for key, value in header.items():
            text = str(value)
            if "\n" in key or "\n" in text or ":" in key:
                raise ValueError("header keys/values must be single-line, ':'-free keys")
            fh.write(f"{key}: {text}\n".encode("utf-8"))
        fh.write(b"\n")
        fh.write(f"arrays {len(arrays)}\n".encode("ascii"))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}".rstrip().encode("ascii") + b"\n")
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    """Return (header dict, arrays dict); raises ValueError on malformed files."""
    with open(path, "rb") as fh:
        if fh.readline().rstrip(b"\n") != MAGIC:
            raise ValueError(f"{path} is not an envmix checkpoint")
        header = {}
        while True:
            line = fh.readline()
            if line in (b"\n", b""):
                break
            key, _, value = line.decode("utf-8").rstrip("\n").partition(": ")
            header[key] = value
        count_line = fh.readline().decode("ascii").split()
        if len(count_line) != 2 or count_line[0] != "arrays":
            raise ValueError("missing array count record")
        arrays = {}
        for _ in range(int(count_line[1])):
            spec = fh.readline().decode("ascii").split()
            name, ndim = spec[0], int(spec[1])
            shape = tuple(int(d) for d in spec[2 : 2 + ndim])
            size = int(np.prod(shape, dtype=int)) if ndim else 1
            payload = fh.read(8 * size)
            if len(payload) != 8 * size:
                raise ValueError(f"truncated payload for array '{name}'")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        return header, arrays
