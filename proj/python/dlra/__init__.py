"""Dynamic low-rank adapters for continual glyph classification."""

try:
    from ._core import *  # noqa: F401,F403  wheel layout: _core installed inside the package
    from ._core import __version__  # noqa: F401
except ImportError:
    from _core import *  # noqa: F401,F403  dev layout: _core on PYTHONPATH next to the build tree
    from _core import __version__  # noqa: F401
