"""Row-wise numeric kernels with a compiled core and a numpy fallback.

The compiled extension (``stablab._ckernels``) is used when it was built and
``STABLAB_PURE_PYTHON`` is not set to ``1``. Both backends expose the same
functions; kernels the extension does not provide (the exp-bound softmax
forward passes) come from numpy under either backend. :func:`use_backend`
switches at runtime (tests and benchmarks use it to compare the two).
"""

import os

from stablab import _npkernels

try:
    from stablab import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FUNCS = (
    "softmax_rows",
    "softmax_rows_backward",
    "layer_norm_rows",
    "layer_norm_rows_backward",
    "log_softmax_rows",
    "sum_squares",
)

BACKEND = "numpy"


def compiled_functions():
    return [fn for fn in _FUNCS if _ckernels is not None and hasattr(_ckernels, fn)]


def available_backends():
    return ["numpy"] + (["compiled"] if _ckernels is not None else [])


def use_backend(name):
    """Select ``"compiled"`` or ``"numpy"`` kernels for the whole process."""
    global BACKEND
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        src = _ckernels
    elif name == "numpy":
        src = _npkernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _FUNCS:
        g[fn] = getattr(src, fn, None) or getattr(_npkernels, fn)
    BACKEND = name


use_backend(
    "compiled"
    if _ckernels is not None and os.environ.get("STABLAB_PURE_PYTHON") != "1"
    else "numpy"
)
