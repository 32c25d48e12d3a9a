"""Sparse-view 4D X-ray reconstruction toolkit.

Core pieces: an acquisition simulator for multi-projection imaging
(two or three fixed views per timestamp), a physics-based implicit
reconstruction model trained adversarially on projection patches, an
iterative algebraic baseline, and volume/image quality metrics.

Submodules are imported lazily so the command line tool can configure
threading before numpy is first loaded.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("autodiff", "baselines", "cli", "fileio", "geometry",
               "metrics", "model", "phantom", "physics", "training")

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
