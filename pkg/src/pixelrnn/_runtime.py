"""Process-level tuning shared by the long-running loops."""

from __future__ import annotations

import ctypes
import sys


def keep_heap() -> None:
    """Stop glibc from returning large freed buffers to the OS after every step.

    Training and emulation allocate and free tens of MB per step; the
    resulting mmap/munmap churn otherwise costs as much system time as the
    arithmetic.  No-op off glibc.
    """
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    libc.mallopt(m_mmap_threshold, 1 << 30)
    libc.mallopt(m_trim_threshold, 1 << 30)
    libc.mallopt(m_top_pad, 256 << 20)
