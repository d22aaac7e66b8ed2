"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``SAFIRE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SAFIRE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

label_components = _impl.label_components
adjacency_pairs = _impl.adjacency_pairs
majority_downsample = _impl.majority_downsample
r2r_anchor_loss = _impl.r2r_anchor_loss
aass_fused = _impl.aass_fused
