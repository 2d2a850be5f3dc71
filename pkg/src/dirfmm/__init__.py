"""dirfmm: directional multiscale fast evaluator for the 2D Helmholtz kernel.

All lengths are measured in wavelengths, so the wavenumber is fixed at
2*pi and the free-space kernel is g(x, y) = (i/4) * H0^(1)(2*pi*|x-y|).
The package provides

* ``kernel``    -- Hankel evaluations and the point kernels,
* ``tree``      -- adaptive quadtree with directional wedge bookkeeping,
* ``lowrank``   -- randomized directional separated representations,
* ``translate`` -- upward/downward translation operators,
* ``driver``    -- the full N-body evaluator, direct reference and benchmarks,
* ``bie``       -- combined-field boundary-integral scattering solver,
* ``cli``       -- the ``dirfmm`` command line front end.
"""

from . import kernel, tree, lowrank, translate, driver, bie  # noqa: F401

__version__ = "0.1.0"
