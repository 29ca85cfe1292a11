"""Process-wide cap on internal parallelism.

Only nearest-neighbour queries are parallelised (through scipy's KD-tree
``workers`` argument); their results do not depend on the worker count, so
every output is identical for any setting.
"""
import os

ENV_VAR = "CORTEXGEO_THREADS"

_threads = None


def set_threads(n):
    global _threads
    if n is not None and int(n) < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _threads = None if n is None else int(n)


def get_threads():
    if _threads is not None:
        return _threads
    value = os.environ.get(ENV_VAR)
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be an integer, got {value!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_VAR} must be >= 1, got {n}")
        return n
    return 1
