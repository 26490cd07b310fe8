"""Dirac fields on the exterior of a non-extreme Kerr-Newman black hole.

Partial-wave Dirac operators in tortoise coordinates, Crank-Nicolson
evolution in the weighted inner product, and numerical checks of the
structural properties of the operator (angular spectrum, deficiency
equations, derivative estimate, time-mean local energy decay).
"""

from kdlab.background import BlackHole, Potential, delta, potential_q, radius_from_tortoise, tortoise

__version__ = "0.1.0"

__all__ = [
    "BlackHole",
    "Potential",
    "delta",
    "tortoise",
    "radius_from_tortoise",
    "potential_q",
    "__version__",
]
