"""Prior-map Lidar localization, map de-noising and traversability mapping."""

import os

# the TBB layer shipped here is too old and warns on every parallel call
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
