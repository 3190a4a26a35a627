"""Atomic file writes and raw little-endian float blobs."""

import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_floats(path, arrays, dtype="<f8"):
    flat = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    blob = np.concatenate(flat).astype(dtype).tobytes() if flat else b""
    atomic_write_bytes(path, blob)


def read_floats(path, dtype="<f8"):
    return np.frombuffer(Path(path).read_bytes(), dtype=dtype).astype(np.float64)


def directory_digest(path):
    """SHA-256 over the relative names and contents of every file under ``path``."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode("utf-8"))
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()
