"""1-Lipschitz networks with learnable linear-spline activations.

Importing the package applies the ``LIPSPLINE_THREADS`` cap (if set) to the
BLAS thread-count environment variables *before* numpy is first imported, so
console-script entry points get a bounded thread pool. When numpy was already
imported by the host process the cap is best-effort only.
"""

import os as _os

_cap = _os.environ.get("LIPSPLINE_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, _cap)

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "spline",
    "activations",
    "layers",
    "network",
    "training",
    "wasserstein",
    "forward_models",
    "imaging",
    "denoiser",
    "pnp",
    "config",
    "reporting",
    "cli",
]


def __getattr__(name):
    if name in __all__:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
