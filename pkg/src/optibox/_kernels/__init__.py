"""Kernel backend selection.

Imports the compiled Cython core when available and falls back to the
numpy implementations otherwise. ``OPTIBOX_KERNELS=py`` forces the
fallback, ``OPTIBOX_KERNELS=c`` demands the compiled core (raising if it
was not built). ``backend_name()`` reports which one is active.
"""

import os

from . import pykernels

_choice = os.environ.get("OPTIBOX_KERNELS", "auto").lower()

if _choice == "py":
    _impl = pykernels
elif _choice == "c":
    from . import _core as _impl
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = pykernels

lstm_seq_forward = _impl.lstm_seq_forward
lstm_seq_backward = _impl.lstm_seq_backward
adam_update = _impl.adam_update
iou_matrix = _impl.iou_matrix


def backend_name():
    return _impl.BACKEND
