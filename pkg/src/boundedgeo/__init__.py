"""Numerical laboratory for slab domains with curved metrics.

Builds graph-bounded slab domains inside a product manifold, audits
their geometry (curvature bounds, collar depth, width, volume
distortion along boundary-normal geodesics), constructs boundary-chart
atlases and partitions of unity, measures Poincare-type constants, and
solves the mixed Dirichlet/Neumann Laplace problem on mapped grids.
"""

__version__ = "0.1.0"
