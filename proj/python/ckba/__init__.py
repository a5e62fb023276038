"""Basis-adaptation ridge surrogates for Darcy flow with conditional KL fields."""

try:
    from ._ckba import *  # noqa: F401,F403
    from ._ckba import __version__
except ImportError:  # in-tree build, extension on sys.path next to the package
    from _ckba import *  # noqa: F401,F403
    from _ckba import __version__
