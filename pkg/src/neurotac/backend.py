"""Kernel backend selection.

The compiled extension is used when it imports; setting ``NEUROTAC_PURE_PYTHON=1``
forces the numpy fallback. Both modules expose ``window_update``,
``count_histogram``, ``block_means``, ``quantize`` and ``dvs_step`` with
identical arithmetic, so results match bit for bit.
"""

import os

from . import _fallback

python_kernels = _fallback

try:
    from . import _kernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and os.environ.get("NEUROTAC_PURE_PYTHON", "") not in ("1", "true"):
    kernels = compiled_kernels
    BACKEND = "cython"
else:
    kernels = _fallback
    BACKEND = "python"


def available_backends() -> dict:
    out = {"python": _fallback}
    if compiled_kernels is not None:
        out["cython"] = compiled_kernels
    return out


def get_kernels(name: str | None = None):
    if name is None:
        return kernels
    try:
        return available_backends()[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None
