"""Stable sub-seed derivation.

Every run owns a single integer seed; components derive their own streams
by hashing (seed, component name, indices...) with sha256, so results do
not depend on call order or interpreter hash randomization.
"""

import hashlib


def derive_seed(seed: int, *parts) -> int:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")
