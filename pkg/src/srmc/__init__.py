"""Energy-based models trained with short-run Langevin sampling.

The learned object is the K-step sampler itself: initialized from a fixed
uniform distribution and run for a small, fixed number of noisy gradient
steps, it behaves like a generator that can synthesize, interpolate, and
reconstruct.  The package also ships exactly solvable diagnostics (lattice
densities, moment matching, information-geometric identities) that make
the flow-to-the-data story quantitatively checkable.
"""

from .tensor import (
    Tensor,
    backward,
    DEFAULT_DTYPE,
    ShapeError,
    DtypeError,
    GraphError,
    NonFiniteError,
)

__all__ = [
    "Tensor",
    "backward",
    "DEFAULT_DTYPE",
    "ShapeError",
    "DtypeError",
    "GraphError",
    "NonFiniteError",
]

__version__ = "0.1.0"
