"""Articulated signed-distance avatars: canonical fields, skinning-guided
warping, marching-tetrahedra extraction and software rendering."""

import os

# the TBB in the base image is too old for numba; outputs do not depend on the layer
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
