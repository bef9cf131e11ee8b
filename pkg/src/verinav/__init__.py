"""Generate-then-verify navigation over discrete viewpoint graphs."""

from verinav.world import Episode, NavEdge, NavGraph, Viewpoint

__version__ = "0.1.0"

__all__ = ["Episode", "NavEdge", "NavGraph", "Viewpoint", "__version__"]
