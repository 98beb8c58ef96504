"""apm: a coordinate-queried perception network with one-sample test-time training.

A single trigger column summarizing an image is unfolded into independent
location-aware queries, fired one at a time through a shared MLP. Hot kernels
run in a compiled extension when built, with a bit-identical pure-Python
fallback selected at import.
"""

from apm._backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
