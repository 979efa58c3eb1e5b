"""Tree-kernel backend selection.

The compiled Cython kernel is preferred when importable; the numpy fallback
implements the identical algorithm (same splits, same bits). Set
``CAUSALTARGET_KERNEL=python`` or ``=cython`` to force a backend.
"""

import os

from . import _tree_py

_forced = os.environ.get("CAUSALTARGET_KERNEL", "").strip().lower()

if _forced == "python":
    _impl = _tree_py
elif _forced == "cython":
    from . import _tree_cy as _impl
else:
    try:
        from . import _tree_cy as _impl
    except ImportError:
        _impl = _tree_py

BACKEND = _impl.BACKEND
grow_tree = _impl.grow_tree
apply_tree = _impl.apply_tree


def get_backend(name=None):
    """Return the kernel module for `name` ('python', 'cython', or None=active)."""
    if name in (None, BACKEND):
        return _impl
    if name == "python":
        return _tree_py
    if name == "cython":
        from . import _tree_cy
        return _tree_cy
    raise ValueError(f"unknown kernel backend: {name!r}")
