"""Kernel backend selection.

Prefers the compiled extension when it was built; falls back to the numpy
reference otherwise.  Set FORGERL_PURE=1 to force the fallback (useful for
benchmarking and for debugging suspected extension issues).
"""

from __future__ import annotations

import os

from . import pure

if os.environ.get("FORGERL_PURE", "") == "1":
    _impl = pure
    BACKEND = "pure"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = pure
        BACKEND = "pure"

sample_row = _impl.sample_row
row_probs = _impl.row_probs
masked_logprob_sum = _impl.masked_logprob_sum
add_scaled_logprob_grad = _impl.add_scaled_logprob_grad
e4m3_encode = _impl.e4m3_encode
e4m3_decode = _impl.e4m3_decode
e4m3_encode_blocks = _impl.e4m3_encode_blocks
e4m3_decode_blocks = _impl.e4m3_decode_blocks

__all__ = [
    "BACKEND",
    "pure",
    "sample_row",
    "row_probs",
    "masked_logprob_sum",
    "add_scaled_logprob_grad",
    "e4m3_encode",
    "e4m3_decode",
    "e4m3_encode_blocks",
    "e4m3_decode_blocks",
]
