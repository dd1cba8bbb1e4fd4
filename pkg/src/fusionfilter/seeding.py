"""Named sub-seeds.

Every random stream in the package is derived from a base seed plus a path of
names, so that adding a new consumer never shifts the draws of another one.
"""

import hashlib


def derive_seed(seed: int, *names) -> int:
    """Return a stable 64-bit seed for ``names`` under ``seed``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest(), "little")
