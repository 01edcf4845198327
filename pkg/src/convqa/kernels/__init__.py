"""Convolution kernel backend selection.

Both backends expose the same three functions and the tests assert they
agree. The numpy reference lowers its contraction to BLAS through einsum
and measures 4-25x faster than the compiled scalar core at this package's
training shapes (see benchmarks/bench_kernels.py), so "auto" picks the
reference whenever a choice exists. CONVQA_KERNEL=numpy|compiled forces a
backend ("compiled" raises if the extension is missing) — the compiled
core stays useful as an independent cross-check and for numpy builds that
ship without a tuned BLAS.
"""

import os

from . import reference

_requested = os.environ.get("CONVQA_KERNEL", "auto")
if _requested not in ("auto", "numpy", "compiled"):
    raise ValueError(f"CONVQA_KERNEL must be auto|numpy|compiled, got {_requested!r}")

try:
    from . import _core
except ImportError:
    _core = None

COMPILED_AVAILABLE = _core is not None

if _requested == "compiled" and _core is None:
    raise ImportError(
        "CONVQA_KERNEL=compiled but convqa.kernels._core is not built; "
        "reinstall without CONVQA_SKIP_EXT"
    )

if _requested == "compiled":
    BACKEND = "compiled"
    conv1d_forward = _core.conv1d_forward
    conv1d_grad_input = _core.conv1d_grad_input
    conv1d_grad_weight = _core.conv1d_grad_weight
else:
    BACKEND = "numpy"
    conv1d_forward = reference.conv1d_forward
    conv1d_grad_input = reference.conv1d_grad_input
    conv1d_grad_weight = reference.conv1d_grad_weight
