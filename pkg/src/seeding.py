"""
Reproducibility helpers: counter-based random streams and content hashes
"""

import hashlib
import json
from typing import Any

import numpy as np

UINT64_MASK = (1 << 64) - 1


def philox_generator(seed: int, *stream: int) -> np.random.Generator:
    """
    Random generator on the 64-bit Philox counter-based bit generator

    The 128-bit key is (seed, stream id); stream ids fold multiple integers
    (patient index, fold, purpose) into the second word so that every
    consumer draws from an independent, platform-stable sequence.
    """
    word = 0
    for part in stream:
        word = (word * 1_000_003 + int(part) + 1) & UINT64_MASK
    key = np.array([int(seed) & UINT64_MASK, word], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def sha256_file(path: str, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()
