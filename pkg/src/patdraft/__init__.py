"""Turn a scientific paper into a patent-style description.

Three stages: concept-graph induction, gated section planning, and
graph-conditioned paragraph generation. All model calls go through
:class:`patdraft.gateway.Gateway`, which can record and replay them.
"""

__version__ = "0.1.0"
