"""Region-pooling kernel backend selection.

Prefers the compiled extension; falls back to numpy. ``MMGEM_KERNEL=py``
forces the fallback, ``MMGEM_KERNEL=cy`` requires the extension.
"""

import os

from . import roialign_py

_choice = os.environ.get("MMGEM_KERNEL", "").lower()

if _choice in ("py", "python"):
    _impl = roialign_py
    BACKEND = "python"
elif _choice in ("cy", "cython"):
    from . import _roialign_cy as _impl  # noqa: F401  (raises if not built)
    BACKEND = "cython"
else:
    try:
        from . import _roialign_cy as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = roialign_py
        BACKEND = "python"

roi_align_forward = _impl.roi_align_forward
roi_align_backward = _impl.roi_align_backward
