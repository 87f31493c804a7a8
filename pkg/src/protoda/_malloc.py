"""glibc malloc tuning for numpy-heavy loops.

The training loop churns through multi-megabyte temporaries every step. With
glibc defaults those exceed the dynamic mmap threshold, so every allocation
round-trips through mmap/munmap and the page faults dominate the runtime
(~10x on elementwise ops). Raising the thresholds keeps the buffers on the
heap free lists. No effect on numerical results; silently skipped on
non-glibc platforms.
"""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_malloc(threshold_bytes: int = 512 * 1024 * 1024) -> bool:
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold_bytes)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, threshold_bytes)
        return bool(ok)
    except (OSError, AttributeError):
        return False
