"""Feature pyramid architecture search toolkit.

Thin python surface over the C++ core: genome grammar, graph compiler,
cost model, synthetic proxy task and search drivers.
"""

from ._core import *  # noqa: F401,F403
from ._core import __version__  # noqa: F401
