"""LOF kernel selection: compiled extension when available, numpy otherwise.

The compiled module is built by setup.py (optional); both backends expose
the same two functions with identical semantics, checked against each other
and against an independent oracle in the test suite.
"""

from . import pure

try:
    from . import _lofkern as _compiled
except ImportError:
    _compiled = None

_active = _compiled if _compiled is not None else pure

LARGE_LRD = pure.LARGE_LRD

fit_structures = _active.fit_structures
score_queries = _active.score_queries


def backend() -> str:
    """Name of the kernel implementation selected at import time."""
    return "compiled" if _active is _compiled else "pure"


def compiled_available() -> bool:
    return _compiled is not None
