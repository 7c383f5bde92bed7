"""Process-level performance settings for long Monte Carlo runs.

Path arrays of 10^5 floats exceed glibc's default mmap threshold, so every
numpy temporary is a fresh mapping that gets page-faulted in. Raising the
threshold keeps temporaries on the heap and roughly halves step cost. This
is opt-in: the CLI, the experiment scripts and the test suite call it.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(mmap_threshold: int = 32 * 2**20, trim_threshold: int = 256 * 2**20) -> bool:
    """Raise glibc malloc thresholds; returns False where unsupported."""
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, mmap_threshold) == 1
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, trim_threshold) == 1
        return bool(ok)
    except (OSError, AttributeError):
        return False
