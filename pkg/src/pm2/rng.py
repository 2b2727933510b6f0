"""Named deterministic random streams.

Every stochastic choice in this package (few-shot sampling, parameter init,
minibatch shuffling, synthetic data) draws from its own Philox stream.
Philox is a 64-bit counter-based generator, so a stream is fully determined
by its 128-bit key; we derive the key by hashing a ``(purpose, seed, *extra)``
tuple with BLAKE2b. Two streams with different purposes never overlap, and
adding a new purpose never perturbs existing ones.

Stream naming convention: short slash-separated purpose strings, e.g.
``stream("sample/class", seed, class_index)``.
"""

import hashlib

import numpy as np


def stream_key(purpose: str, seed: int, *extra: int) -> np.ndarray:
    """128-bit Philox key for the (purpose, seed, *extra) stream."""
    h = hashlib.blake2b(digest_size=16)
    h.update(purpose.encode("utf-8"))
    h.update(b"\x00")
    for value in (seed, *extra):
        h.update(int(value).to_bytes(8, "little", signed=True))
    return np.frombuffer(h.digest(), dtype=np.uint64).copy()


def stream(purpose: str, seed: int, *extra: int) -> np.random.Generator:
    """A fresh generator for the named stream. Same arguments, same draws."""
    return np.random.Generator(np.random.Philox(key=stream_key(purpose, seed, *extra)))
