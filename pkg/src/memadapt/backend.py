"""Kernel backend selection.

Two implementations of the low-level kernels exist: a compiled Cython
extension (`_kernels`) and a pure-numpy fallback (`_purepy`). Both expose
the same four functions: softmax_rows, cross_attention, bank_write,
bank_read.

Selection happens at import time from the MEMADAPT_BACKEND environment
variable:

    auto       compiled if the extension built, otherwise pure (default)
    compiled   require the extension, ImportError if missing
    pure       force the numpy fallback

Callers should access kernels as attributes (``backend.bank_write(...)``)
rather than importing the functions directly, so that ``use()`` can
switch the active implementation at runtime (the benchmark suite and the
parity tests rely on this).
"""

import os

from . import _purepy

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

# rebound by use(); start unset so import-time selection below goes
# through the same path as runtime switching
ACTIVE = None
softmax_rows = None
cross_attention = None
bank_write = None
bank_read = None

_KERNEL_NAMES = ("softmax_rows", "cross_attention", "bank_write", "bank_read")


def available():
    """Names of the backends usable in this process."""
    names = ["pure"]
    if _compiled is not None:
        names.append("compiled")
    return names


def use(name):
    """Select the active backend; returns the resolved name."""
    global ACTIVE
    if name == "auto":
        name = "compiled" if _compiled is not None else "pure"
    if name == "pure":
        mod = _purepy
    elif name == "compiled":
        if _compiled is None:
            raise ImportError(
                "MEMADAPT_BACKEND=compiled but the _kernels extension is not "
                "built; reinstall with a working C toolchain or use 'pure'"
            )
        mod = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}, expected auto, pure or compiled")
    g = globals()
    for fn in _KERNEL_NAMES:
        g[fn] = getattr(mod, fn)
    ACTIVE = name
    return name


def active():
    """Name of the currently selected backend."""
    return ACTIVE


use(os.environ.get("MEMADAPT_BACKEND", "auto"))
