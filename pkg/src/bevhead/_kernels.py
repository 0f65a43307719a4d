"""Select the rotated-IoU kernel backend at import.

The compiled Cython module is used when it was built; otherwise the pure
Python module is used.  Set ``BEVHEAD_BACKEND=python`` to force the fallback.
"""

import os

_want = os.environ.get("BEVHEAD_BACKEND", "auto").lower()

if _want == "python":
    from bevhead import _pykernels as impl
else:
    try:
        from bevhead import _ckernels as impl
    except ImportError:
        if _want == "cython":
            raise
        from bevhead import _pykernels as impl

BACKEND = "cython" if impl.__name__.endswith("_ckernels") else "python"

iou_bev = impl.iou_bev
iou_bev_pairs = impl.iou_bev_pairs
iou_bev_matrix = impl.iou_bev_matrix
nms_bev = impl.nms_bev

__all__ = ["BACKEND", "impl", "iou_bev", "iou_bev_pairs", "iou_bev_matrix", "nms_bev"]
