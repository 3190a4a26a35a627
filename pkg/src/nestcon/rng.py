"""Seeding helpers.

All randomness flows through ``numpy.random.Generator`` backed by PCG64, so
streams are reproducible across platforms for a fixed numpy version.
Independent stages derive their own seed as ``seed XOR H(tag)`` where ``H``
is the first 8 bytes of SHA-256 of the tag, little-endian.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def tag_hash(tag):
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed, tag):
    return (int(seed) & _MASK64) ^ tag_hash(tag)


def make_rng(seed, tag=None):
    if tag is not None:
        seed = derive_seed(seed, tag)
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))
