"""Small shared helpers."""
from __future__ import annotations

import os


def thread_count():
    """Internal parallelism cap; ATLAS_THREADS overrides (default 1)."""
    raw = os.environ.get("ATLAS_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
