"""Named, splittable random streams on top of the Philox counter generator.

All randomness in the package flows through :func:`stream`. A stream is
identified by an integer seed plus a tuple of string/int tags (for example
``stream(7, "init")`` or ``stream(7, "epoch", 3)``). The same
(seed, tags) pair always yields the same Philox4x64-10 generator, on every
platform, because Philox is a pure counter-based algorithm and the key
derivation below uses only CRC-32 of the tag bytes.

Distinct tag tuples give statistically independent streams, which is what
makes the scheme splittable: a consumer that owns (seed, "fit") can hand out
(seed, "fit", k) to k workers without coordinating state.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream"]


def _tag_words(tags: tuple) -> list[int]:
    words = []
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            words.append(int(tag) & 0xFFFFFFFF)
        elif isinstance(tag, str):
            words.append(zlib.crc32(tag.encode("utf-8")))
        else:
            raise TypeError(f"stream tags must be str or int, got {type(tag).__name__}")
    return words


def stream(seed: int, *tags) -> np.random.Generator:
    """Return the Philox generator for the given seed and tag path."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + _tag_words(tags)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
