"""
Random Streams
All randomness flows from one seed; sub-streams are derived by hashing
"""
import hashlib

import numpy as np


def derive_seed(seed, purpose, *keys):
    """
    Derive a 64-bit sub-seed from (seed, purpose-string, keys...)

    The hash is fixed, so sub-seeds are stable across platforms and runs.
    """
    text = ':'.join([str(int(seed)), purpose] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def make_rng(seed, purpose, *keys):
    """numpy Generator for a named sub-stream"""
    return np.random.default_rng(derive_seed(seed, purpose, *keys))
