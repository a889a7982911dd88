"""Grounded keyword toolkit.

Trains a speech network to predict which words occur in an utterance using
only soft word probabilities from a vision tagger as supervision, then
evaluates it as a spoken bag-of-words classifier and keyword spotter.

Submodules are imported lazily so the command-line front end can configure
BLAS threading before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor", "ops", "optim", "features", "targets",
    "models", "evaluation", "synth", "cli", "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
