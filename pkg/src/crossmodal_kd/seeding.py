"""Per-component seeds derived from one master seed.

``derive_seed(seed, "student")`` is the first 8 bytes (little-endian, top bit
cleared) of ``sha256(f"{seed}/student")``.  Every consumer of randomness asks
for its own label, so adding a component never perturbs another's stream.
"""
import hashlib


def derive_seed(seed: int, *labels) -> int:
    key = "/".join([str(int(seed)), *(str(x) for x in labels)])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
