"""Facial expression recognition toolkit on a from-scratch CNN micro-framework.

Submodules load lazily so the command-line front end can pin BLAS
thread counts before numpy is first imported.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "nn", "optim", "data", "evaluation", "gradcheck",
               "cli", "errors", "ioutil")

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_SUBMODULES))
